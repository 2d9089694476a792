//! End-to-end pipeline tests: command behavior, file formats, exit codes,
//! and the reproducibility contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use emint::config::RunConfig;
use emint::dataio::{self, load_manifest, Split, SyntheticSpec};
use emint::evalens::{EnsembleMember, EnsembleSpec, TaskMask};
use emint::pipeline;
use emint::pseudo::BalanceMode;
use tempfile::TempDir;

fn gen_data(dir: &Path, n_train: usize, n_unlabeled: usize, n_test: usize, seed: u64) -> PathBuf {
    dataio::generate_synthetic_dataset(
        &SyntheticSpec {
            n_train,
            n_unlabeled,
            n_test,
            emotion_classes: 3,
            intent_classes: 4,
            dim: 8,
            separation: 8.0,
            seed,
        },
        dir,
    )
    .unwrap();
    dir.join("manifest.jsonl")
}

fn base_config(manifest: &Path, out: &Path) -> RunConfig {
    let mut config = RunConfig {
        manifest: Some(manifest.to_path_buf()),
        out_dir: Some(out.to_path_buf()),
        hidden_size: 16,
        fusion_heads: 2,
        interaction_heads: 1,
        ..RunConfig::default()
    };
    config.optimizer.epochs = 2;
    config.optimizer.batch_size = 16;
    config.optimizer.seed = 5;
    config
}

#[test]
fn train_smoke_writes_checkpoint_and_one_log_entry_per_epoch() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 10, 0, 4, 1);
    let mut config = base_config(&manifest, &dir.path().join("run"));
    config.optimizer.epochs = 1;
    let outcome = pipeline::cmd_train(&config).unwrap();
    assert!(outcome.checkpoint_dir.join("params.bin").is_file());
    assert!(outcome.checkpoint_dir.join("meta.json").is_file());
    assert_eq!(outcome.logs.len(), 1);
    let log_text = fs::read_to_string(&outcome.log_path).unwrap();
    assert_eq!(log_text.lines().count(), 1);
}

#[test]
fn identical_config_and_seed_reproduce_training_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 24, 0, 8, 2);
    let c1 = base_config(&manifest, &dir.path().join("a"));
    let c2 = base_config(&manifest, &dir.path().join("b"));
    let o1 = pipeline::cmd_train(&c1).unwrap();
    let o2 = pipeline::cmd_train(&c2).unwrap();
    let s1 = o1.logs.last().unwrap().dev_score.unwrap();
    let s2 = o2.logs.last().unwrap().dev_score.unwrap();
    assert_eq!(s1.emotion_score.to_bits(), s2.emotion_score.to_bits());
    assert_eq!(s1.intent_score.to_bits(), s2.intent_score.to_bits());
    assert_eq!(
        fs::read(o1.checkpoint_dir.join("params.bin")).unwrap(),
        fs::read(o2.checkpoint_dir.join("params.bin")).unwrap()
    );
    assert_eq!(
        fs::read(&o1.log_path).unwrap(),
        fs::read(&o2.log_path).unwrap()
    );
}

#[test]
fn rerunning_from_the_config_snapshot_reproduces_outputs() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 16, 0, 8, 3);
    let config = base_config(&manifest, &dir.path().join("a"));
    let o1 = pipeline::cmd_train(&config).unwrap();

    let mut snapshot = RunConfig::load(&dir.path().join("a/train_config.json")).unwrap();
    snapshot.out_dir = Some(dir.path().join("b"));
    let o2 = pipeline::cmd_train(&snapshot).unwrap();
    assert_eq!(
        fs::read(o1.checkpoint_dir.join("params.bin")).unwrap(),
        fs::read(o2.checkpoint_dir.join("params.bin")).unwrap()
    );
}

#[test]
fn untrained_model_selects_nothing_at_high_threshold() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 12, 20, 4, 4);
    let mut config = base_config(&manifest, &dir.path().join("run"));
    config.optimizer.epochs = 1;
    config.optimizer.learning_rate = 1e-6; // essentially untrained
    let outcome = pipeline::cmd_train(&config).unwrap();
    let pseudo = pipeline::cmd_pseudo_label(&config, &outcome.checkpoint_dir).unwrap();
    assert_eq!(pseudo.unlabeled_count, 20);
    // softmax over 3/4 near-uniform classes peaks far below 0.99
    assert_eq!(pseudo.selected_count, 0);
}

#[test]
fn zero_threshold_selects_every_unlabeled_sample_before_balancing() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 12, 15, 4, 5);
    let mut config = base_config(&manifest, &dir.path().join("run"));
    config.pseudo.threshold = 1e-9;
    config.pseudo.balance_mode = BalanceMode::None;
    let outcome = pipeline::cmd_train(&config).unwrap();
    let pseudo = pipeline::cmd_pseudo_label(&config, &outcome.checkpoint_dir).unwrap();
    assert_eq!(pseudo.selected_count, 15);
}

#[test]
fn pseudo_label_command_never_touches_the_source_manifest() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 12, 10, 4, 6);
    let before = fs::read(&manifest).unwrap();
    let config = base_config(&manifest, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config).unwrap();
    let pseudo = pipeline::cmd_pseudo_label(&config, &outcome.checkpoint_dir).unwrap();
    assert_eq!(before, fs::read(&manifest).unwrap());
    assert_ne!(pseudo.augmented_manifest_path, manifest);
    // the augmented manifest still loads cleanly from its location
    load_manifest(&pseudo.augmented_manifest_path).unwrap();
}

#[test]
fn finetune_works_with_zero_pseudo_records_and_requires_stage1() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 12, 0, 4, 7);
    let config = base_config(&manifest, &dir.path().join("run"));
    let stage1 = pipeline::cmd_train(&config).unwrap();

    let mut ft = config.clone();
    ft.optimizer.finetune_epochs = 1;
    ft.out_dir = Some(dir.path().join("run_ft"));
    let stage2 = pipeline::cmd_finetune(&ft, &stage1.checkpoint_dir).unwrap();
    assert!(stage2.checkpoint_dir.ends_with("stage2"));

    // fine-tuning from a stage-2 checkpoint is a stage mismatch
    let err = pipeline::cmd_finetune(&ft, &stage2.checkpoint_dir).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn finetune_learning_rate_defaults_to_a_tenth_of_stage_one() {
    let config = RunConfig::default();
    assert!((config.optimizer.effective_finetune_lr() - 0.1 * config.optimizer.learning_rate).abs() < 1e-15);
}

#[test]
fn predictions_are_normalized_ordered_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 12, 0, 10, 8);
    let config = base_config(&manifest, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config).unwrap();

    let (p1, preds) = pipeline::cmd_predict(&config, &outcome.checkpoint_dir, Split::Test).unwrap();
    assert_eq!(preds.len(), 10);
    for p in &preds {
        assert!((p.emotion_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((p.intent_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // manifest order
    let loaded = load_manifest(&manifest).unwrap();
    let expected_ids: Vec<String> = loaded
        .records_in(Split::Test)
        .map(|r| r.id.clone())
        .collect();
    let got_ids: Vec<String> = preds.iter().map(|p| p.id.clone()).collect();
    assert_eq!(got_ids, expected_ids);

    // byte-identical on a second run
    let bytes1 = fs::read(&p1).unwrap();
    let (p2, _) = pipeline::cmd_predict(&config, &outcome.checkpoint_dir, Split::Test).unwrap();
    assert_eq!(bytes1, fs::read(&p2).unwrap());
}

#[test]
fn predicting_an_empty_split_writes_an_empty_file() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 10, 0, 4, 9);
    let config = base_config(&manifest, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config).unwrap();
    let (path, preds) = pipeline::cmd_predict(&config, &outcome.checkpoint_dir, Split::Dev).unwrap();
    assert!(preds.is_empty());
    assert_eq!(fs::read(&path).unwrap().len(), 0);
}

#[test]
fn checkpoint_refuses_a_dimensionally_different_dataset() {
    let dir = TempDir::new().unwrap();
    let manifest8 = gen_data(&dir.path().join("data8"), 10, 0, 4, 10);
    let config8 = base_config(&manifest8, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config8).unwrap();

    // same classes, different embedding dim
    dataio::generate_synthetic_dataset(
        &SyntheticSpec {
            n_train: 10,
            n_unlabeled: 0,
            n_test: 4,
            emotion_classes: 3,
            intent_classes: 4,
            dim: 6,
            separation: 8.0,
            seed: 10,
        },
        &dir.path().join("data6"),
    )
    .unwrap();
    let mut config6 = config8.clone();
    config6.manifest = Some(dir.path().join("data6/manifest.jsonl"));
    let err = pipeline::cmd_predict(&config6, &outcome.checkpoint_dir, Split::Test).unwrap_err();
    assert_eq!(err.exit_code(), 4, "dim mismatch should exit 4: {err}");
}

#[test]
fn singleton_ensemble_equals_plain_prediction_scores() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 30, 0, 12, 11);
    let mut config = base_config(&manifest, &dir.path().join("run"));
    config.optimizer.epochs = 6;
    let outcome = pipeline::cmd_train(&config).unwrap();

    let (pred_path, _) = pipeline::cmd_predict(&config, &outcome.checkpoint_dir, Split::Test).unwrap();
    let single = pipeline::cmd_evaluate(&config, &pred_path, Split::Test).unwrap();

    let checkpoint = outcome.checkpoint_dir.to_str().unwrap().to_string();
    let mut ens_config = config.clone();
    ens_config.ensemble = Some(EnsembleSpec {
        members: vec![EnsembleMember {
            checkpoint: checkpoint.clone(),
            weight: 1.0,
            tasks: TaskMask::Both,
        }],
    });
    let ensembled = pipeline::cmd_ensemble(&ens_config, Split::Test).unwrap();
    assert_eq!(ensembled.emotion_score.to_bits(), single.emotion_score.to_bits());
    assert_eq!(ensembled.intent_score.to_bits(), single.intent_score.to_bits());

    // two identical members change nothing either
    let mut twin_config = config.clone();
    twin_config.ensemble = Some(EnsembleSpec {
        members: vec![
            EnsembleMember {
                checkpoint: checkpoint.clone(),
                weight: 1.0,
                tasks: TaskMask::Both,
            },
            EnsembleMember {
                checkpoint,
                weight: 1.0,
                tasks: TaskMask::Both,
            },
        ],
    });
    let twins = pipeline::cmd_ensemble(&twin_config, Split::Test).unwrap();
    assert_eq!(twins.emotion_score.to_bits(), single.emotion_score.to_bits());
    assert_eq!(twins.intent_score.to_bits(), single.intent_score.to_bits());
    let members = twins.members.unwrap();
    assert_eq!(members.len(), 2);
    assert_eq!(members[0].emotion_score, members[1].emotion_score);
}

#[test]
fn ensemble_requires_every_task_covered() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 10, 0, 4, 12);
    let config = base_config(&manifest, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config).unwrap();
    let mut ens = config.clone();
    ens.ensemble = Some(EnsembleSpec {
        members: vec![EnsembleMember {
            checkpoint: outcome.checkpoint_dir.to_str().unwrap().into(),
            weight: 1.0,
            tasks: TaskMask::Intent,
        }],
    });
    let err = pipeline::cmd_ensemble(&ens, Split::Test).unwrap_err();
    assert_eq!(err.exit_code(), 2, "uncovered task is a config error: {err}");
}

// --- CLI-level checks ------------------------------------------------------

fn emint() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emint"))
}

#[test]
fn cli_full_pipeline_succeeds_with_exit_zero() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let status = emint()
        .args(["gen-synthetic", "--train", "20", "--unlabeled", "10", "--test", "8"])
        .args(["--emotion-classes", "3", "--intent-classes", "4", "--dim", "8"])
        .args(["--separation", "8", "--seed", "1"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let manifest = data.join("manifest.jsonl");
    let status = emint()
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&run)
        .args(["--hidden-size", "16", "--epochs", "2", "--batch-size", "16", "--seed", "3"])
        .status()
        .unwrap();
    assert!(status.success());

    let status = emint()
        .arg("predict")
        .arg("--checkpoint")
        .arg(run.join("stage1"))
        .arg("--manifest")
        .arg(&manifest)
        .args(["--split", "test"])
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());

    let status = emint()
        .arg("evaluate")
        .arg("--predictions")
        .arg(run.join("predictions_test.jsonl"))
        .arg("--manifest")
        .arg(&manifest)
        .args(["--split", "test"])
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run.join("score_report.json").is_file());
}

#[test]
fn cli_exit_codes_distinguish_error_classes() {
    let dir = TempDir::new().unwrap();

    // 2: configuration error (unknown config field)
    let bad_config = dir.path().join("bad.json");
    fs::write(&bad_config, "{\"not_a_field\": 1}").unwrap();
    let status = emint()
        .arg("train")
        .arg("--config")
        .arg(&bad_config)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // 2: validation error (unknown split)
    let status = emint()
        .args(["predict", "--checkpoint", "x", "--split", "bogus", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // 3: data-format error (missing manifest)
    let status = emint()
        .args(["train", "--manifest", "/definitely/not/here.jsonl", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // 4: checkpoint error (missing checkpoint directory)
    let manifest = gen_data(&dir.path().join("data"), 6, 0, 2, 13);
    let status = emint()
        .arg("predict")
        .arg("--checkpoint")
        .arg(dir.path().join("no_such_checkpoint"))
        .arg("--manifest")
        .arg(&manifest)
        .args(["--split", "test"])
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn prediction_files_round_trip_through_the_reader() {
    let dir = TempDir::new().unwrap();
    let manifest = gen_data(&dir.path().join("data"), 10, 0, 5, 14);
    let config = base_config(&manifest, &dir.path().join("run"));
    let outcome = pipeline::cmd_train(&config).unwrap();
    let (path, preds) = pipeline::cmd_predict(&config, &outcome.checkpoint_dir, Split::Test).unwrap();
    let back = pipeline::read_predictions(&path).unwrap();
    assert_eq!(back.len(), preds.len());
    for (a, b) in back.iter().zip(&preds) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.emotion_pred, b.emotion_pred);
        assert_eq!(a.emotion_probs, b.emotion_probs);
    }
}
