//! Command implementations behind the CLI: synthetic data generation, the
//! two training stages, pseudo-labeling, prediction, evaluation, and
//! ensembling. Each command validates its inputs up front, writes its
//! artifacts under the configured output directory, and records the
//! effective configuration next to them.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::dataio::{
    generate_synthetic_dataset, load_dataset, load_manifest, save_manifest, Dataset,
    DatasetManifest, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evalens::{
    ensemble_probs, evaluate_run, EnsembleSpec, LabeledSampleRef, MemberContribution, Prediction,
    ScoreReport,
};
use crate::model::{argmax, JointModel, ModelDims};
use crate::pseudo::{
    augment_dataset, default_cell_cap, predict_unlabeled, select_confident, PseudoReportRecord,
    SelectionPolicy,
};
use crate::train::{predict_indices, train_model, EpochLog, TrainSettings};

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::DataFormat(format!("serialize {}: {e}", path.display())))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path)
        .map_err(|e| Error::DataFormat(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: Prediction = serde_json::from_str(&line).map_err(|e| {
            Error::DataFormat(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(pred);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::DataFormat(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn snapshot_config(config: &RunConfig, out_dir: &Path, command: &str) -> Result<()> {
    config.save(&out_dir.join(format!("{command}_config.json")))
}

/// Model dims implied by a config and a loaded dataset.
fn model_dims(config: &RunConfig, dataset: &Dataset) -> ModelDims {
    ModelDims {
        input_dims: dataset.input_dims,
        hidden: config.hidden_size,
        fusion_heads: config.fusion_heads,
        interaction_heads: config.interaction_heads,
        emotion_classes: dataset.emotion_classes,
        intent_classes: dataset.intent_classes,
        text_kernel: config.effective_text_kernel(),
    }
}

fn check_checkpoint_dims(meta: &CheckpointMeta, dataset: &Dataset) -> Result<()> {
    let d = &meta.dims;
    if d.input_dims != dataset.input_dims {
        return Err(Error::DimMismatch(format!(
            "checkpoint input dims {:?} do not match dataset dims {:?}",
            d.input_dims, dataset.input_dims
        )));
    }
    if d.emotion_classes != dataset.emotion_classes || d.intent_classes != dataset.intent_classes
    {
        return Err(Error::DimMismatch(format!(
            "checkpoint classes ({}, {}) do not match manifest class counts ({}, {})",
            d.emotion_classes, d.intent_classes, dataset.emotion_classes, dataset.intent_classes
        )));
    }
    Ok(())
}

/// The evaluation split used during training: `dev` when the manifest has
/// one, otherwise `test`.
fn eval_split(dataset: &Dataset) -> Split {
    if dataset.samples_in(Split::Dev).next().is_some() {
        Split::Dev
    } else {
        Split::Test
    }
}

fn train_settings(config: &RunConfig, learning_rate: f64, epochs: usize) -> TrainSettings {
    TrainSettings {
        learning_rate,
        epochs,
        batch_size: config.optimizer.batch_size,
        clip_norm: config.optimizer.clip_norm,
        noise_sigma: config.noise_sigma,
        dropout: config.optimizer.dropout,
        seed: config.optimizer.seed,
        loss_weights: config.loss_weights.to_weights(),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub logs: Vec<EpochLog>,
}

pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    generate_synthetic_dataset(spec, out_dir)?;
    Ok(out_dir.join("manifest.jsonl"))
}

/// Stage-1 training on the human-labeled training records.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let manifest = load_manifest(config.require_manifest()?)?;
    let dataset = load_dataset(&manifest, config.average_inputs)?;

    let train_indices: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train && !s.is_pseudo)
        .map(|(i, _)| i)
        .collect();
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "manifest has no labeled training records".into(),
        ));
    }
    let eval_indices = dataset.indices_in(eval_split(&dataset));

    let mut model = JointModel::init(model_dims(config, &dataset), config.optimizer.seed)?;
    let settings = train_settings(config, config.optimizer.learning_rate, config.optimizer.epochs);
    let logs = train_model(&mut model, &dataset, &train_indices, &eval_indices, &settings)?;

    snapshot_config(config, &out_dir, "train")?;
    let log_path = out_dir.join("train_log.jsonl");
    write_jsonl(&log_path, &logs)?;
    let checkpoint_dir = out_dir.join("stage1");
    save_checkpoint(&checkpoint_dir, &model, Stage::Stage1, config)?;
    Ok(TrainOutcome {
        checkpoint_dir,
        log_path,
        logs,
    })
}

#[derive(Debug)]
pub struct PseudoOutcome {
    pub report_path: PathBuf,
    pub augmented_manifest_path: PathBuf,
    pub unlabeled_count: usize,
    pub selected_count: usize,
    pub cap_used: Option<usize>,
}

/// Predicts the unlabeled split with a stage-1 checkpoint, selects and
/// balances high-confidence predictions, and writes the augmented
/// manifest next to the source manifest (record paths stay valid). The
/// source manifest itself is never modified.
pub fn cmd_pseudo_label(config: &RunConfig, checkpoint_dir: &Path) -> Result<PseudoOutcome> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let manifest_path = config.require_manifest()?.to_path_buf();
    let manifest = load_manifest(&manifest_path)?;
    let (model, meta) = load_checkpoint(checkpoint_dir)?;
    if meta.stage != Stage::Stage1 {
        return Err(Error::Checkpoint(format!(
            "pseudo-labeling expects a stage1 checkpoint, found {}",
            meta.stage.name()
        )));
    }
    let dataset = load_dataset(&manifest, meta.config.average_inputs)?;
    check_checkpoint_dims(&meta, &dataset)?;

    let predictions = predict_unlabeled(&model, &dataset)?;
    let cap = match config.pseudo.cap {
        Some(c) => Some(c),
        None => default_cell_cap(&manifest),
    };
    let policy = SelectionPolicy {
        threshold: config.pseudo.threshold,
        balance_mode: config.pseudo.balance_mode,
        cap,
    };
    let selected = select_confident(&predictions, &policy)?;

    let selected_ids: std::collections::HashSet<&str> =
        selected.iter().map(|p| p.sample_id.as_str()).collect();
    let report: Vec<PseudoReportRecord> = predictions
        .iter()
        .map(|p| PseudoReportRecord {
            sample_id: p.sample_id.clone(),
            emotion_pred: p.emotion_pred,
            intent_pred: p.intent_pred,
            emotion_conf: p.emotion_conf,
            intent_conf: p.intent_conf,
            selected: selected_ids.contains(p.sample_id.as_str()),
        })
        .collect();

    let augmented = augment_dataset(&manifest, &selected)?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest");
    let augmented_path = manifest_path.with_file_name(format!("{stem}_pseudo.jsonl"));
    save_manifest(&augmented, &augmented_path)?;

    snapshot_config(config, &out_dir, "pseudo_label")?;
    let report_path = out_dir.join("pseudo_report.jsonl");
    write_jsonl(&report_path, &report)?;
    Ok(PseudoOutcome {
        report_path,
        augmented_manifest_path: augmented_path,
        unlabeled_count: predictions.len(),
        selected_count: selected.len(),
        cap_used: policy.cap,
    })
}

/// Stage-2 fine-tuning from a stage-1 checkpoint over the union of clean
/// and pseudo-labeled training records.
pub fn cmd_finetune(config: &RunConfig, checkpoint_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let manifest = load_manifest(config.require_manifest()?)?;
    let (mut model, meta) = load_checkpoint(checkpoint_dir)?;
    if meta.stage != Stage::Stage1 {
        return Err(Error::Checkpoint(format!(
            "fine-tuning expects a stage1 checkpoint, found {}",
            meta.stage.name()
        )));
    }
    let dataset = load_dataset(&manifest, meta.config.average_inputs)?;
    check_checkpoint_dims(&meta, &dataset)?;

    let train_indices = dataset.indices_in(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "manifest has no training records".into(),
        ));
    }
    let eval_indices = dataset.indices_in(eval_split(&dataset));
    let settings = train_settings(
        config,
        config.optimizer.effective_finetune_lr(),
        config.optimizer.finetune_epochs,
    );
    let logs = train_model(&mut model, &dataset, &train_indices, &eval_indices, &settings)?;

    snapshot_config(config, &out_dir, "finetune")?;
    let log_path = out_dir.join("finetune_log.jsonl");
    write_jsonl(&log_path, &logs)?;
    let checkpoint_dir = out_dir.join("stage2");
    save_checkpoint(&checkpoint_dir, &model, Stage::Stage2, config)?;
    Ok(TrainOutcome {
        checkpoint_dir,
        log_path,
        logs,
    })
}

/// Evaluation-mode predictions over one split, in manifest order.
pub fn cmd_predict(
    config: &RunConfig,
    checkpoint_dir: &Path,
    split: Split,
) -> Result<(PathBuf, Vec<Prediction>)> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let manifest = load_manifest(config.require_manifest()?)?;
    let (model, meta) = load_checkpoint(checkpoint_dir)?;
    let dataset = load_dataset(&manifest, meta.config.average_inputs)?;
    check_checkpoint_dims(&meta, &dataset)?;

    let indices = dataset.indices_in(split);
    let predictions = predict_indices(&model, &dataset, &indices)?;
    snapshot_config(config, &out_dir, "predict")?;
    let path = out_dir.join(format!("predictions_{}.jsonl", split.name()));
    write_jsonl(&path, &predictions)?;
    Ok((path, predictions))
}

fn labeled_refs(manifest: &DatasetManifest, split: Split) -> Vec<LabeledSampleRef> {
    manifest
        .records_in(split)
        .filter_map(|r| match (r.emotion_label, r.intent_label) {
            (Some(e), Some(i)) => Some(LabeledSampleRef {
                id: r.id.clone(),
                emotion_label: e,
                intent_label: i,
            }),
            _ => None,
        })
        .collect()
}

/// Scores an existing prediction file against a split's labels.
pub fn cmd_evaluate(
    config: &RunConfig,
    predictions_path: &Path,
    split: Split,
) -> Result<ScoreReport> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let manifest = load_manifest(config.require_manifest()?)?;
    let predictions = read_predictions(predictions_path)?;
    let labeled = labeled_refs(&manifest, split);
    let report = evaluate_run(
        &predictions,
        &labeled,
        manifest.header.class_counts.emotion,
        manifest.header.class_counts.intent,
    )?;
    snapshot_config(config, &out_dir, "evaluate")?;
    write_json(&out_dir.join("score_report.json"), &report)?;
    Ok(report)
}

/// Runs every ensemble member over the split, fuses the per-task softmax
/// probabilities under the task masks, and scores the fused predictions.
pub fn cmd_ensemble(config: &RunConfig, split: Split) -> Result<ScoreReport> {
    config.validate()?;
    let out_dir = config.require_out_dir()?.to_path_buf();
    let spec: &EnsembleSpec = config
        .ensemble
        .as_ref()
        .ok_or_else(|| Error::Config("no ensemble spec configured".into()))?;
    spec.validate()?;
    let manifest = load_manifest(config.require_manifest()?)?;
    let labeled = labeled_refs(&manifest, split);

    let mut member_predictions: Vec<Vec<Prediction>> = Vec::with_capacity(spec.members.len());
    let mut contributions: Vec<MemberContribution> = Vec::with_capacity(spec.members.len());
    let ce = manifest.header.class_counts.emotion;
    let ci = manifest.header.class_counts.intent;
    for member in &spec.members {
        let (model, meta) = load_checkpoint(Path::new(&member.checkpoint))?;
        let dataset = load_dataset(&manifest, meta.config.average_inputs)?;
        check_checkpoint_dims(&meta, &dataset)?;
        let indices = dataset.indices_in(split);
        let predictions = predict_indices(&model, &dataset, &indices)?;
        let (mut emotion_score, mut intent_score) = (None, None);
        if !labeled.is_empty() {
            let report = evaluate_run(&predictions, &labeled, ce, ci)?;
            if member.tasks.covers_emotion() {
                emotion_score = Some(report.emotion_score);
            }
            if member.tasks.covers_intent() {
                intent_score = Some(report.intent_score);
            }
        }
        contributions.push(MemberContribution {
            checkpoint: member.checkpoint.clone(),
            weight: member.weight,
            tasks: member.tasks,
            emotion_score,
            intent_score,
        });
        member_predictions.push(predictions);
    }

    let count = member_predictions[0].len();
    for (member, preds) in spec.members.iter().zip(&member_predictions) {
        if preds.len() != count {
            return Err(Error::DimMismatch(format!(
                "member '{}' produced {} predictions, expected {count}",
                member.checkpoint,
                preds.len()
            )));
        }
    }

    let emotion_weights = spec.task_weights(true);
    let intent_weights = spec.task_weights(false);
    let mut fused: Vec<Prediction> = Vec::with_capacity(count);
    for idx in 0..count {
        let id = member_predictions[0][idx].id.clone();
        for preds in &member_predictions {
            if preds[idx].id != id {
                return Err(Error::InvalidArgument(format!(
                    "ensemble members disagree on sample order at '{id}'"
                )));
            }
        }
        let emotion_members: Vec<Vec<f64>> = member_predictions
            .iter()
            .map(|p| p[idx].emotion_probs.clone())
            .collect();
        let intent_members: Vec<Vec<f64>> = member_predictions
            .iter()
            .map(|p| p[idx].intent_probs.clone())
            .collect();
        let emotion_probs = ensemble_probs(&emotion_members, &emotion_weights)?;
        let intent_probs = ensemble_probs(&intent_members, &intent_weights)?;
        fused.push(Prediction {
            id,
            emotion_pred: argmax(&emotion_probs),
            intent_pred: argmax(&intent_probs),
            emotion_probs,
            intent_probs,
        });
    }

    let mut report = evaluate_run(&fused, &labeled, ce, ci)?;
    report.members = Some(contributions);
    snapshot_config(config, &out_dir, "ensemble")?;
    write_jsonl(
        &out_dir.join(format!("ensemble_predictions_{}.jsonl", split.name())),
        &fused,
    )?;
    write_json(&out_dir.join("ensemble_report.json"), &report)?;
    Ok(report)
}
