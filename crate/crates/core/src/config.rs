//! Run configuration: a strict JSON document whose fields mirror the CLI
//! flags. Unknown fields are rejected so typos in experiment configs fail
//! loudly instead of silently falling back to defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalens::EnsembleSpec;
use crate::heads::LossWeights;
use crate::pseudo::BalanceMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightsConfig {
    pub emotion: f64,
    pub intent: f64,
}

impl Default for LossWeightsConfig {
    fn default() -> Self {
        LossWeightsConfig {
            emotion: 1.0,
            intent: 1.0,
        }
    }
}

impl LossWeightsConfig {
    pub fn to_weights(&self) -> LossWeights {
        LossWeights {
            emotion: self.emotion,
            intent: self.intent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Defaults to a tenth of the stage-1 learning rate.
    pub finetune_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            epochs: 50,
            finetune_epochs: 20,
            finetune_learning_rate: None,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
            dropout: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn effective_finetune_lr(&self) -> f64 {
        self.finetune_learning_rate
            .unwrap_or(self.learning_rate * 0.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoConfig {
    pub threshold: f64,
    pub balance_mode: BalanceMode,
    /// Defaults to the median per-cell count of the labeled training set.
    pub cap: Option<usize>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            threshold: 0.99,
            balance_mode: BalanceMode::JointCellCap,
            cap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_fusion_heads")]
    pub fusion_heads: usize,
    #[serde(default = "default_interaction_heads")]
    pub interaction_heads: usize,
    #[serde(default = "default_true")]
    pub average_inputs: bool,
    /// Defaults to 1 with averaged inputs, 3 otherwise.
    #[serde(default)]
    pub text_kernel: Option<usize>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub loss_weights: LossWeightsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub pseudo: PseudoConfig,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
}

fn default_hidden() -> usize {
    128
}

fn default_fusion_heads() -> usize {
    4
}

fn default_interaction_heads() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_sigma() -> f64 {
    0.01
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            out_dir: None,
            hidden_size: default_hidden(),
            fusion_heads: default_fusion_heads(),
            interaction_heads: default_interaction_heads(),
            average_inputs: true,
            text_kernel: None,
            noise_sigma: default_sigma(),
            loss_weights: LossWeightsConfig::default(),
            optimizer: OptimizerConfig::default(),
            pseudo: PseudoConfig::default(),
            ensemble: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1 {
            return Err(Error::Config("hidden_size must be >= 1".into()));
        }
        for (name, heads) in [
            ("fusion_heads", self.fusion_heads),
            ("interaction_heads", self.interaction_heads),
        ] {
            if heads < 1 || !self.hidden_size.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{name} = {heads} must divide hidden_size = {}",
                    self.hidden_size
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(self.pseudo.threshold > 0.0 && self.pseudo.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "pseudo.threshold must lie in (0, 1], got {}",
                self.pseudo.threshold
            )));
        }
        if self.optimizer.batch_size < 1 {
            return Err(Error::Config("optimizer.batch_size must be >= 1".into()));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("optimizer.learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.dropout) {
            return Err(Error::Config("optimizer.dropout must lie in [0, 1)".into()));
        }
        let lw = self.loss_weights.to_weights();
        lw.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(spec) = &self.ensemble {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn effective_text_kernel(&self) -> usize {
        self.text_kernel
            .unwrap_or(if self.average_inputs { 1 } else { 3 })
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest configured (set `manifest` or pass --manifest)".into()))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory configured (set `out_dir` or pass --out)".into()))
    }
}
