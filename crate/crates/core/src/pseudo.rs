//! Pseudo-label generation for the semi-supervised loop: predict the
//! unlabeled split, keep predictions where both task confidences clear the
//! threshold, cap class counts for balance, and fold the survivors back
//! into the training split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{argmax, JointModel};

/// A model-predicted label pair for one originally unlabeled sample.
/// Confidences are the max softmax probability of each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub emotion_pred: usize,
    pub intent_pred: usize,
    pub emotion_conf: f64,
    pub intent_conf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    None,
    PerTaskCap,
    JointCellCap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub threshold: f64,
    pub balance_mode: BalanceMode,
    pub cap: Option<usize>,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if let Some(cap) = self.cap {
            if cap == 0 {
                return Err(Error::InvalidArgument("balance cap must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One line of the pseudo-label report: every unlabeled sample appears,
/// with `selected` marking the survivors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoReportRecord {
    pub sample_id: String,
    pub emotion_pred: usize,
    pub intent_pred: usize,
    pub emotion_conf: f64,
    pub intent_conf: f64,
    pub selected: bool,
}

/// Evaluation-mode predictions for every unlabeled sample, in dataset
/// order.
pub fn predict_unlabeled(model: &JointModel, dataset: &Dataset) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for sample in dataset.samples_in(Split::Unlabeled) {
        let (emotion_probs, intent_probs) = model.predict(sample)?;
        let emotion_pred = argmax(&emotion_probs);
        let intent_pred = argmax(&intent_probs);
        out.push(PseudoLabel {
            sample_id: sample.id.clone(),
            emotion_pred,
            intent_pred,
            emotion_conf: emotion_probs[emotion_pred],
            intent_conf: intent_probs[intent_pred],
        });
    }
    Ok(out)
}

/// Keeps exactly the predictions whose confidences clear the threshold on
/// BOTH tasks (input order preserved), then applies the balance step.
pub fn select_confident(
    preds: &[PseudoLabel],
    policy: &SelectionPolicy,
) -> Result<Vec<PseudoLabel>> {
    policy.validate()?;
    let passing: Vec<PseudoLabel> = preds
        .iter()
        .filter(|p| p.emotion_conf >= policy.threshold && p.intent_conf >= policy.threshold)
        .cloned()
        .collect();
    balance_classes(&passing, policy.balance_mode, policy.cap)
}

/// Caps class counts over an already threshold-filtered list.
///
/// Candidates are considered greedily in descending `min(emotion_conf,
/// intent_conf)`, ties broken by ascending sample id; a candidate is kept
/// only if it fits under every applicable cap. The kept set is returned in
/// the original input order.
pub fn balance_classes(
    preds: &[PseudoLabel],
    mode: BalanceMode,
    cap: Option<usize>,
) -> Result<Vec<PseudoLabel>> {
    if mode == BalanceMode::None {
        return Ok(preds.to_vec());
    }
    let cap = cap.ok_or_else(|| {
        Error::InvalidArgument("balance mode requires a cap".into())
    })?;
    if cap == 0 {
        return Err(Error::InvalidArgument("balance cap must be >= 1".into()));
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let ka = preds[a].emotion_conf.min(preds[a].intent_conf);
        let kb = preds[b].emotion_conf.min(preds[b].intent_conf);
        kb.partial_cmp(&ka)
            .unwrap()
            .then_with(|| preds[a].sample_id.cmp(&preds[b].sample_id))
    });

    let mut emotion_counts: HashMap<usize, usize> = HashMap::new();
    let mut intent_counts: HashMap<usize, usize> = HashMap::new();
    let mut cell_counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut keep = vec![false; preds.len()];
    for idx in order {
        let p = &preds[idx];
        let fits = match mode {
            BalanceMode::None => unreachable!(),
            BalanceMode::PerTaskCap => {
                emotion_counts.get(&p.emotion_pred).copied().unwrap_or(0) < cap
                    && intent_counts.get(&p.intent_pred).copied().unwrap_or(0) < cap
            }
            BalanceMode::JointCellCap => {
                cell_counts
                    .get(&(p.emotion_pred, p.intent_pred))
                    .copied()
                    .unwrap_or(0)
                    < cap
            }
        };
        if fits {
            *emotion_counts.entry(p.emotion_pred).or_insert(0) += 1;
            *intent_counts.entry(p.intent_pred).or_insert(0) += 1;
            *cell_counts.entry((p.emotion_pred, p.intent_pred)).or_insert(0) += 1;
            keep[idx] = true;
        }
    }
    Ok(preds
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect())
}

/// Default cap for `joint_cell_cap`: the median count over the non-empty
/// (emotion, intent) cells of the human-labeled training records, rounded
/// up. Returns None when there are no labeled training records.
pub fn default_cell_cap(manifest: &DatasetManifest) -> Option<usize> {
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    for rec in manifest.records_in(Split::Train) {
        if rec.is_pseudo {
            continue;
        }
        if let (Some(e), Some(i)) = (rec.emotion_label, rec.intent_label) {
            *cells.entry((e, i)).or_insert(0) += 1;
        }
    }
    if cells.is_empty() {
        return None;
    }
    let mut counts: Vec<usize> = cells.values().copied().collect();
    counts.sort_unstable();
    let n = counts.len();
    let median_x2 = if n % 2 == 1 {
        2 * counts[n / 2]
    } else {
        counts[n / 2 - 1] + counts[n / 2]
    };
    Some(median_x2.div_ceil(2))
}

/// Returns a copy of the manifest where every selected sample has become a
/// pseudo-labeled training record. The input manifest is not modified.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    selected: &[PseudoLabel],
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    let counts = out.header.class_counts;
    for sel in selected {
        let rec = out
            .records
            .iter_mut()
            .find(|r| r.id == sel.sample_id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown sample id '{}'", sel.sample_id))
            })?;
        if rec.split != Split::Unlabeled || rec.has_labels() {
            return Err(Error::InvalidArgument(format!(
                "sample '{}' is not an unlabeled record",
                sel.sample_id
            )));
        }
        if sel.emotion_pred >= counts.emotion || sel.intent_pred >= counts.intent {
            return Err(Error::InvalidArgument(format!(
                "pseudo labels ({}, {}) for '{}' out of range",
                sel.emotion_pred, sel.intent_pred, sel.sample_id
            )));
        }
        rec.split = Split::Train;
        rec.is_pseudo = true;
        rec.emotion_label = Some(sel.emotion_pred);
        rec.intent_label = Some(sel.intent_pred);
    }
    Ok(out)
}
