use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emint::config::RunConfig;
use emint::dataio::{Split, SyntheticSpec};
use emint::pipeline;
use emint::pseudo::BalanceMode;
use emint::Error;

#[derive(Parser)]
#[command(
    name = "emint",
    about = "Joint emotion/intent classification over pre-extracted multimodal embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (synthetic generation and training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct Overrides {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    fusion_heads: Option<usize>,
    #[arg(long)]
    interaction_heads: Option<usize>,
    #[arg(long)]
    average_inputs: Option<bool>,
    #[arg(long)]
    text_kernel: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Pseudo-label balance mode: none, per_task_cap, or joint_cell_cap.
    #[arg(long)]
    balance_mode: Option<String>,
    /// Pseudo-label balance cap.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic Gaussian-cluster dataset under --out.
    GenSynthetic {
        #[arg(long, default_value_t = 600)]
        train: usize,
        #[arg(long, default_value_t = 400)]
        unlabeled: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        emotion_classes: usize,
        #[arg(long, default_value_t = 9)]
        intent_classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
    },
    /// Stage-1 training on the labeled training split.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict the unlabeled split and emit an augmented manifest.
    PseudoLabel {
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage-2 fine-tuning on clean plus pseudo-labeled records.
    Finetune {
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluation-mode inference over one split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, unlabeled, dev, or test.
        #[arg(long)]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the configured ensemble over one split and score it.
    Ensemble {
        #[arg(long)]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score an existing prediction file against a split's labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn effective_config(cli_config: &Option<PathBuf>, overrides: &Overrides, seed: &Option<u64>, out: &Option<PathBuf>) -> Result<RunConfig, Error> {
    let mut config = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &overrides.manifest {
        config.manifest = Some(m.clone());
    }
    if let Some(o) = out {
        config.out_dir = Some(o.clone());
    }
    if let Some(v) = overrides.hidden_size {
        config.hidden_size = v;
    }
    if let Some(v) = overrides.fusion_heads {
        config.fusion_heads = v;
    }
    if let Some(v) = overrides.interaction_heads {
        config.interaction_heads = v;
    }
    if let Some(v) = overrides.average_inputs {
        config.average_inputs = v;
    }
    if let Some(v) = overrides.text_kernel {
        config.text_kernel = Some(v);
    }
    if let Some(v) = overrides.noise_sigma {
        config.noise_sigma = v;
    }
    if let Some(v) = overrides.learning_rate {
        config.optimizer.learning_rate = v;
    }
    if let Some(v) = overrides.epochs {
        config.optimizer.epochs = v;
    }
    if let Some(v) = overrides.finetune_epochs {
        config.optimizer.finetune_epochs = v;
    }
    if let Some(v) = overrides.finetune_learning_rate {
        config.optimizer.finetune_learning_rate = Some(v);
    }
    if let Some(v) = overrides.batch_size {
        config.optimizer.batch_size = v;
    }
    if let Some(v) = overrides.clip_norm {
        config.optimizer.clip_norm = v;
    }
    if let Some(v) = overrides.dropout {
        config.optimizer.dropout = v;
    }
    if let Some(v) = overrides.threshold {
        config.pseudo.threshold = v;
    }
    if let Some(mode) = &overrides.balance_mode {
        config.pseudo.balance_mode = match mode.as_str() {
            "none" => BalanceMode::None,
            "per_task_cap" => BalanceMode::PerTaskCap,
            "joint_cell_cap" => BalanceMode::JointCellCap,
            other => {
                return Err(Error::Config(format!(
                    "unknown balance mode '{other}' (expected none, per_task_cap, or joint_cell_cap)"
                )))
            }
        };
    }
    if let Some(v) = overrides.cap {
        config.pseudo.cap = Some(v);
    }
    if let Some(s) = seed {
        config.optimizer.seed = *s;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenSynthetic {
            train,
            unlabeled,
            test,
            emotion_classes,
            intent_classes,
            dim,
            separation,
        } => {
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| Error::Config("gen-synthetic needs --out".into()))?;
            let spec = SyntheticSpec {
                n_train: *train,
                n_unlabeled: *unlabeled,
                n_test: *test,
                emotion_classes: *emotion_classes,
                intent_classes: *intent_classes,
                dim: *dim,
                separation: *separation,
                seed: cli.seed.unwrap_or(0),
            };
            let manifest = pipeline::cmd_gen_synthetic(&spec, out)?;
            println!(
                "wrote {} ({} train / {} unlabeled / {} test samples)",
                manifest.display(),
                train,
                unlabeled,
                test
            );
        }
        Command::Train { overrides } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let outcome = pipeline::cmd_train(&config)?;
            if let Some(last) = outcome.logs.last() {
                match &last.dev_score {
                    Some(s) => println!(
                        "stage1 done: loss {:.4}, dev emotion {:.4} / intent {:.4} / overall {:.4}",
                        last.mean_loss, s.emotion_score, s.intent_score, s.overall_score
                    ),
                    None => println!("stage1 done: loss {:.4}", last.mean_loss),
                }
            }
            println!("checkpoint: {}", outcome.checkpoint_dir.display());
        }
        Command::PseudoLabel {
            checkpoint,
            overrides,
        } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let outcome = pipeline::cmd_pseudo_label(&config, checkpoint)?;
            println!(
                "selected {} of {} unlabeled samples (cap {:?})",
                outcome.selected_count, outcome.unlabeled_count, outcome.cap_used
            );
            println!("report: {}", outcome.report_path.display());
            println!(
                "augmented manifest: {}",
                outcome.augmented_manifest_path.display()
            );
        }
        Command::Finetune {
            checkpoint,
            overrides,
        } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let outcome = pipeline::cmd_finetune(&config, checkpoint)?;
            if let Some(last) = outcome.logs.last() {
                match &last.dev_score {
                    Some(s) => println!(
                        "stage2 done: loss {:.4}, dev emotion {:.4} / intent {:.4} / overall {:.4}",
                        last.mean_loss, s.emotion_score, s.intent_score, s.overall_score
                    ),
                    None => println!("stage2 done: loss {:.4}", last.mean_loss),
                }
            }
            println!("checkpoint: {}", outcome.checkpoint_dir.display());
        }
        Command::Predict {
            checkpoint,
            split,
            overrides,
        } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let split = Split::parse(split)?;
            let (path, predictions) = pipeline::cmd_predict(&config, checkpoint, split)?;
            println!("wrote {} predictions to {}", predictions.len(), path.display());
        }
        Command::Ensemble { split, overrides } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let split = Split::parse(split)?;
            let report = pipeline::cmd_ensemble(&config, split)?;
            println!(
                "ensemble emotion {:.4} / intent {:.4} / overall {:.4}",
                report.emotion_score, report.intent_score, report.overall_score
            );
        }
        Command::Evaluate {
            predictions,
            split,
            overrides,
        } => {
            let config = effective_config(&cli.config, overrides, &cli.seed, &cli.out)?;
            let split = Split::parse(split)?;
            let report = pipeline::cmd_evaluate(&config, predictions, split)?;
            println!(
                "emotion {:.4} / intent {:.4} / overall {:.4}",
                report.emotion_score, report.intent_score, report.overall_score
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
