//! Scoring and per-task ensembling.
//!
//! The score of one task is the support-weighted mean of per-class F1
//! values; the overall score of a run is the arithmetic mean of the two
//! task scores. Ensembles average softmax probabilities per task with
//! weight normalization over the members that contribute to that task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class confusion counts for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub classes: usize,
    /// `matrix[true_class][predicted_class]`
    pub matrix: Vec<Vec<usize>>,
    pub total: usize,
}

impl ConfusionStats {
    pub fn from_labels(
        true_labels: &[usize],
        pred_labels: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if true_labels.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot score an empty label list".into(),
            ));
        }
        if true_labels.len() != pred_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "label lists disagree in length: {} vs {}",
                true_labels.len(),
                pred_labels.len()
            )));
        }
        let mut matrix = vec![vec![0usize; classes]; classes];
        for (&t, &p) in true_labels.iter().zip(pred_labels) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label ({t}, {p}) out of range for {classes} classes"
                )));
            }
            matrix[t][p] += 1;
        }
        Ok(ConfusionStats {
            classes,
            matrix,
            total: true_labels.len(),
        })
    }

    pub fn support(&self, class: usize) -> usize {
        self.matrix[class].iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.matrix[class][class]
    }

    pub fn false_positives(&self, class: usize) -> usize {
        (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.matrix[t][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> usize {
        self.support(class) - self.true_positives(class)
    }

    /// Harmonic mean of precision and recall per class; classes with no
    /// predicted and no actual positives score 0 (they also carry zero
    /// support weight).
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c) as f64;
                let fp = self.false_positives(c) as f64;
                let fn_ = self.false_negatives(c) as f64;
                let denom = 2.0 * tp + fp + fn_;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn weighted_f1(&self) -> f64 {
        let f1 = self.per_class_f1();
        (0..self.classes)
            .map(|c| f1[c] * self.support(c) as f64 / self.total as f64)
            .sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes).map(|c| self.true_positives(c)).sum();
        correct as f64 / self.total as f64
    }
}

/// Support-weighted F1 over equal-length label lists.
pub fn weighted_f1(true_labels: &[usize], pred_labels: &[usize], classes: usize) -> Result<f64> {
    Ok(ConfusionStats::from_labels(true_labels, pred_labels, classes)?.weighted_f1())
}

/// Arithmetic mean of the two task scores.
pub fn overall_score(emotion_score: f64, intent_score: f64) -> Result<f64> {
    for (name, s) in [("emotion", emotion_score), ("intent", intent_score)] {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!(
                "{name} score {s} outside [0, 1]"
            )));
        }
    }
    Ok((emotion_score + intent_score) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub emotion_score: f64,
    pub intent_score: f64,
    pub overall_score: f64,
}

impl TaskScore {
    pub fn new(emotion_score: f64, intent_score: f64) -> Result<Self> {
        Ok(TaskScore {
            emotion_score,
            intent_score,
            overall_score: overall_score(emotion_score, intent_score)?,
        })
    }
}

/// Weight-normalized elementwise average of probability vectors.
pub fn ensemble_probs(prob_vectors: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if prob_vectors.is_empty() || prob_vectors.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probability vectors with {} weights",
            prob_vectors.len(),
            weights.len()
        )));
    }
    let dim = prob_vectors[0].len();
    if prob_vectors.iter().any(|p| p.len() != dim) {
        return Err(Error::DimMismatch(
            "ensemble members disagree on class count".into(),
        ));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument("negative ensemble weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "ensemble weights sum to zero".into(),
        ));
    }
    let mut out = vec![0.0; dim];
    for (probs, &w) in prob_vectors.iter().zip(weights) {
        for (o, &p) in out.iter_mut().zip(probs) {
            *o += w * p;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(out)
}

/// Which task(s) an ensemble member contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMask {
    Emotion,
    Intent,
    Both,
}

impl TaskMask {
    pub fn covers_emotion(&self) -> bool {
        matches!(self, TaskMask::Emotion | TaskMask::Both)
    }

    pub fn covers_intent(&self) -> bool {
        matches!(self, TaskMask::Intent | TaskMask::Both)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub checkpoint: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default = "default_mask")]
    pub tasks: TaskMask,
}

fn default_weight() -> f64 {
    1.0
}

fn default_mask() -> TaskMask {
    TaskMask::Both
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("ensemble has no members".into()));
        }
        for m in &self.members {
            if m.weight < 0.0 {
                return Err(Error::Config(format!(
                    "member '{}' has negative weight {}",
                    m.checkpoint, m.weight
                )));
            }
        }
        for (task, covered) in [
            ("emotion", self.task_weights(true)),
            ("intent", self.task_weights(false)),
        ] {
            if covered.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "no ensemble member contributes weight to the {task} task"
                )));
            }
        }
        Ok(())
    }

    /// Per-member weights for one task; members whose mask excludes the
    /// task get weight 0.
    pub fn task_weights(&self, emotion: bool) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| {
                let covered = if emotion {
                    m.tasks.covers_emotion()
                } else {
                    m.tasks.covers_intent()
                };
                if covered {
                    m.weight
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// One line of the prediction file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub emotion_probs: Vec<f64>,
    pub intent_probs: Vec<f64>,
    pub emotion_pred: usize,
    pub intent_pred: usize,
}

/// Ground truth for one labeled sample, as fed to [`evaluate_run`].
#[derive(Debug, Clone)]
pub struct LabeledSampleRef {
    pub id: String,
    pub emotion_label: usize,
    pub intent_label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub score: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

/// Per-member score contribution listed in ensemble reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberContribution {
    pub checkpoint: String,
    pub weight: f64,
    pub tasks: TaskMask,
    pub emotion_score: Option<f64>,
    pub intent_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub emotion_score: f64,
    pub intent_score: f64,
    pub overall_score: f64,
    pub emotion: TaskReport,
    pub intent: TaskReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<MemberContribution>>,
}

impl ScoreReport {
    pub fn task_score(&self) -> TaskScore {
        TaskScore {
            emotion_score: self.emotion_score,
            intent_score: self.intent_score,
            overall_score: self.overall_score,
        }
    }
}

/// Scores a prediction set against the labeled samples of a split. Every
/// labeled sample must have a prediction.
pub fn evaluate_run(
    predictions: &[Prediction],
    labeled: &[LabeledSampleRef],
    emotion_classes: usize,
    intent_classes: usize,
) -> Result<ScoreReport> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "no labeled samples to evaluate against".into(),
        ));
    }
    let mut true_e = Vec::with_capacity(labeled.len());
    let mut pred_e = Vec::with_capacity(labeled.len());
    let mut true_i = Vec::with_capacity(labeled.len());
    let mut pred_i = Vec::with_capacity(labeled.len());
    for sample in labeled {
        let pred = predictions
            .iter()
            .find(|p| p.id == sample.id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("missing prediction for sample '{}'", sample.id))
            })?;
        true_e.push(sample.emotion_label);
        pred_e.push(pred.emotion_pred);
        true_i.push(sample.intent_label);
        pred_i.push(pred.intent_pred);
    }
    let emotion = ConfusionStats::from_labels(&true_e, &pred_e, emotion_classes)?;
    let intent = ConfusionStats::from_labels(&true_i, &pred_i, intent_classes)?;
    let emotion_score = emotion.weighted_f1();
    let intent_score = intent.weighted_f1();
    Ok(ScoreReport {
        emotion_score,
        intent_score,
        overall_score: overall_score(emotion_score, intent_score)?,
        emotion: TaskReport {
            score: emotion_score,
            per_class_f1: emotion.per_class_f1(),
            confusion: emotion.matrix.clone(),
            accuracy: emotion.accuracy(),
        },
        intent: TaskReport {
            score: intent_score,
            per_class_f1: intent.per_class_f1(),
            confusion: intent.matrix.clone(),
            accuracy: intent.accuracy(),
        },
        members: None,
    })
}
