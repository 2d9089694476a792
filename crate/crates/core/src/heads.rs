//! Classifier heads, the joint two-task loss, and the finite-difference
//! gradient-check harness used across the numeric modules.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{ParamBinder, Tape, TensorId};
use crate::error::{Error, Result};

/// Per-task affine heads over the pooled interaction features.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    /// H x C_e
    pub emotion_weight: Array2<f64>,
    /// 1 x C_e
    pub emotion_bias: Array2<f64>,
    /// H x C_i
    pub intent_weight: Array2<f64>,
    /// 1 x C_i
    pub intent_bias: Array2<f64>,
}

impl ClassifierParams {
    pub fn zeros(hidden: usize, emotion_classes: usize, intent_classes: usize) -> Self {
        ClassifierParams {
            emotion_weight: Array2::zeros((hidden, emotion_classes)),
            emotion_bias: Array2::zeros((1, emotion_classes)),
            intent_weight: Array2::zeros((hidden, intent_classes)),
            intent_bias: Array2::zeros((1, intent_classes)),
        }
    }

    pub fn init(
        hidden: usize,
        emotion_classes: usize,
        intent_classes: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let mut p = Self::zeros(hidden, emotion_classes, intent_classes);
        let scale = 1.0 / (hidden as f64).sqrt();
        p.emotion_weight.mapv_inplace(|_| rng.gen_range(-scale..scale));
        p.intent_weight.mapv_inplace(|_| rng.gen_range(-scale..scale));
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.emotion_weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        let ce = self.emotion_weight.ncols();
        let ci = self.intent_weight.ncols();
        if ce < 2 || ci < 2 {
            return Err(Error::InvalidArgument(
                "both heads need at least 2 classes".into(),
            ));
        }
        if self.intent_weight.nrows() != h
            || self.emotion_bias.dim() != (1, ce)
            || self.intent_bias.dim() != (1, ci)
        {
            return Err(Error::DimMismatch("classifier head shapes".into()));
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> ClassifierIds {
        ClassifierIds {
            emotion_weight: binder.bind(format!("{prefix}.emotion_weight"), &self.emotion_weight),
            emotion_bias: binder.bind(format!("{prefix}.emotion_bias"), &self.emotion_bias),
            intent_weight: binder.bind(format!("{prefix}.intent_weight"), &self.intent_weight),
            intent_bias: binder.bind(format!("{prefix}.intent_bias"), &self.intent_bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierIds {
    pub emotion_weight: TensorId,
    pub emotion_bias: TensorId,
    pub intent_weight: TensorId,
    pub intent_bias: TensorId,
}

/// Raw per-task logits for one sample.
#[derive(Debug, Clone)]
pub struct LogitsPair {
    pub emotion: Array2<f64>,
    pub intent: Array2<f64>,
}

/// Non-negative task weights with a positive sum.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub emotion: f64,
    pub intent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            emotion: 1.0,
            intent: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.emotion < 0.0 || self.intent < 0.0 || self.emotion + self.intent <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative with a positive sum, got ({}, {})",
                self.emotion, self.intent
            )));
        }
        Ok(())
    }
}

/// Shift-stable softmax: positive outputs summing to one.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "softmax input contains non-finite values".into(),
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn classify_graph(
    tape: &mut Tape,
    emotion_feature: TensorId,
    intent_feature: TensorId,
    ids: &ClassifierIds,
) -> (TensorId, TensorId) {
    let e = tape.matmul(emotion_feature, ids.emotion_weight);
    let e = tape.add_row(e, ids.emotion_bias);
    let i = tape.matmul(intent_feature, ids.intent_weight);
    let i = tape.add_row(i, ids.intent_bias);
    (e, i)
}

/// Affine heads: the emotion head consumes the emotion branch's pooled
/// feature, the intent head the intent branch's.
pub fn classify(
    emotion_feature: &Array2<f64>,
    intent_feature: &Array2<f64>,
    params: &ClassifierParams,
) -> Result<LogitsPair> {
    params.validate()?;
    let h = params.hidden_size();
    if emotion_feature.dim() != (1, h) || intent_feature.dim() != (1, h) {
        return Err(Error::DimMismatch(format!(
            "classifier features must be (1, {h}), got {:?} and {:?}",
            emotion_feature.dim(),
            intent_feature.dim()
        )));
    }
    let mut tape = Tape::new();
    let ef = tape.constant(emotion_feature.clone());
    let inf = tape.constant(intent_feature.clone());
    let mut binder = ParamBinder::new(&mut tape);
    let ids = params.bind(&mut binder, "heads");
    let (e, i) = classify_graph(&mut tape, ef, inf, &ids);
    Ok(LogitsPair {
        emotion: tape.value(e).clone(),
        intent: tape.value(i).clone(),
    })
}

/// Weighted sum of the two cross-entropies.
pub fn joint_loss(
    logits: &LogitsPair,
    emotion_label: usize,
    intent_label: usize,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    if emotion_label >= logits.emotion.ncols() {
        return Err(Error::InvalidArgument(format!(
            "emotion label {emotion_label} out of range for {} classes",
            logits.emotion.ncols()
        )));
    }
    if intent_label >= logits.intent.ncols() {
        return Err(Error::InvalidArgument(format!(
            "intent label {intent_label} out of range for {} classes",
            logits.intent.ncols()
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(logits.emotion.clone());
    let i = tape.constant(logits.intent.clone());
    let ce_e = tape.cross_entropy(e, emotion_label);
    let ce_i = tape.cross_entropy(i, intent_label);
    let we = tape.scale(ce_e, weights.emotion);
    let wi = tape.scale(ce_i, weights.intent);
    let total = tape.add(we, wi);
    Ok(tape.value(total)[(0, 0)])
}

/// Central finite differences against a supplied analytic gradient.
///
/// Returns the maximum relative error over coordinates. Coordinates where
/// both gradients fall below 1e-6 in magnitude are compared by absolute
/// difference instead: the f64 rounding noise of a central difference is
/// about `|f| * 1e-16 / step`, so relative comparison is meaningless for
/// gradients near that floor.
pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} coordinates but the point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut shifted = point.to_vec();
    for i in 0..point.len() {
        shifted[i] = point[i] + step;
        let plus = f(&shifted);
        shifted[i] = point[i] - step;
        let minus = f(&shifted);
        shifted[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < 1e-6 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
