//! Deterministic mini-batch training.
//!
//! Batch order, noise, dropout, and parameter updates are all derived from
//! the run seed; gradients accumulate in a fixed order, so two runs with
//! the same configuration produce bit-identical models.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBinder, Tape};
use crate::dataio::{mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::evalens::{self, LabeledSampleRef, Prediction, TaskScore};
use crate::heads::LossWeights;
use crate::model::{argmax, JointModel, Mode};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub noise_sigma: f64,
    pub dropout: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_score: Option<TaskScore>,
}

struct Adam {
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: usize,
    learning_rate: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &JointModel, learning_rate: f64) -> Self {
        let shapes: Vec<(usize, usize)> = model.arrays().iter().map(|(_, a)| a.dim()).collect();
        Adam {
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
            learning_rate,
        }
    }

    fn update(&mut self, model: &mut JointModel, grads: &[Array2<f64>]) {
        self.step += 1;
        let bias1 = 1.0 - BETA1.powi(self.step as i32);
        let bias2 = 1.0 - BETA2.powi(self.step as i32);
        for (((param, grad), m), v) in model
            .arrays_mut()
            .into_iter()
            .map(|(_, a)| a)
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

fn shuffled(indices: &[usize], rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut out = indices.to_vec();
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Mean loss and parameter gradients over one batch, gradients in
/// `model.arrays()` order.
fn batch_gradients(
    model: &JointModel,
    dataset: &Dataset,
    batch: &[usize],
    weights: &LossWeights,
    mode_rng: &mut ChaCha20Rng,
    noise_sigma: f64,
    dropout: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let (ids, bound) = {
        let mut binder = ParamBinder::new(&mut tape);
        let ids = model.bind(&mut binder);
        (ids, binder.into_bound())
    };
    let mut losses = Vec::with_capacity(batch.len());
    for &idx in batch {
        let mut mode = Mode::Train {
            noise_sigma,
            dropout,
            rng: mode_rng,
        };
        losses.push(model.loss_graph(&mut tape, &ids, &dataset.samples[idx], weights, &mut mode)?);
    }
    let total = tape.sum_n(&losses);
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let mean_value = tape.value(mean)[(0, 0)];
    let grads = tape.backward(mean)?;
    let collected: Vec<Array2<f64>> = bound
        .iter()
        .map(|(_, id)| grads.get_or_zeros(*id, tape.value(*id).dim()))
        .collect();
    Ok((mean_value, collected))
}

/// Evaluation-mode predictions over a set of sample indices.
pub fn predict_indices(
    model: &JointModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let sample = &dataset.samples[idx];
        let (emotion_probs, intent_probs) = model.predict(sample)?;
        out.push(Prediction {
            id: sample.id.clone(),
            emotion_pred: argmax(&emotion_probs),
            intent_pred: argmax(&intent_probs),
            emotion_probs,
            intent_probs,
        });
    }
    Ok(out)
}

fn score_indices(
    model: &JointModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Option<TaskScore>> {
    let labeled: Vec<LabeledSampleRef> = indices
        .iter()
        .filter_map(|&idx| {
            let s = &dataset.samples[idx];
            match (s.emotion_label, s.intent_label) {
                (Some(e), Some(i)) => Some(LabeledSampleRef {
                    id: s.id.clone(),
                    emotion_label: e,
                    intent_label: i,
                }),
                _ => None,
            }
        })
        .collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let predictions = predict_indices(model, dataset, indices)?;
    let report = evalens::evaluate_run(
        &predictions,
        &labeled,
        dataset.emotion_classes,
        dataset.intent_classes,
    )?;
    Ok(Some(report.task_score()))
}

/// Trains in place over `train_indices`, scoring `eval_indices` after each
/// epoch. Returns one log entry per epoch.
pub fn train_model(
    model: &mut JointModel,
    dataset: &Dataset,
    train_indices: &[usize],
    eval_indices: &[usize],
    settings: &TrainSettings,
) -> Result<Vec<EpochLog>> {
    if train_indices.is_empty() {
        return Err(Error::InvalidArgument(
            "no labeled training samples".into(),
        ));
    }
    if settings.batch_size < 1 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    settings.loss_weights.validate()?;
    for &idx in train_indices {
        let s = &dataset.samples[idx];
        if s.emotion_label.is_none() || s.intent_label.is_none() {
            return Err(Error::InvalidArgument(format!(
                "training sample '{}' is unlabeled",
                s.id
            )));
        }
    }

    let mut adam = Adam::new(model, settings.learning_rate);
    let mut logs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut order_rng =
            ChaCha20Rng::seed_from_u64(mix_seed(&[settings.seed, 0xB47C, epoch as u64]));
        let mut mode_rng =
            ChaCha20Rng::seed_from_u64(mix_seed(&[settings.seed, 0x7015E, epoch as u64]));
        let order = shuffled(train_indices, &mut order_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(settings.batch_size) {
            let (loss, mut grads) = batch_gradients(
                model,
                dataset,
                batch,
                &settings.loss_weights,
                &mut mode_rng,
                settings.noise_sigma,
                settings.dropout,
            )?;
            clip_global_norm(&mut grads, settings.clip_norm);
            adam.update(model, &grads);
            loss_sum += loss;
            batches += 1;
        }
        let dev_score = score_indices(model, dataset, eval_indices)?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.max(1) as f64,
            dev_score,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_dataset, load_dataset, Split, SyntheticSpec};
    use crate::model::ModelDims;
    use tempfile::TempDir;

    fn tiny_setup() -> (TempDir, Dataset, JointModel) {
        let dir = TempDir::new().unwrap();
        let manifest = generate_synthetic_dataset(
            &SyntheticSpec {
                n_train: 12,
                n_unlabeled: 0,
                n_test: 6,
                emotion_classes: 2,
                intent_classes: 2,
                dim: 4,
                separation: 6.0,
                seed: 31,
            },
            dir.path(),
        )
        .unwrap();
        let dataset = load_dataset(&manifest, true).unwrap();
        let dims = ModelDims {
            input_dims: dataset.input_dims,
            hidden: 8,
            fusion_heads: 2,
            interaction_heads: 1,
            emotion_classes: 2,
            intent_classes: 2,
            text_kernel: 1,
        };
        let model = JointModel::init(dims, 1).unwrap();
        (dir, dataset, model)
    }

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            learning_rate: 1e-2,
            epochs,
            batch_size: 4,
            clip_norm: 5.0,
            noise_sigma: 0.01,
            dropout: 0.1,
            seed: 7,
            loss_weights: LossWeights::default(),
        }
    }

    #[test]
    fn training_reduces_the_loss_on_separable_data() {
        let (_dir, dataset, mut model) = tiny_setup();
        let train_idx = dataset.indices_in(Split::Train);
        let eval_idx = dataset.indices_in(Split::Test);
        let logs = train_model(&mut model, &dataset, &train_idx, &eval_idx, &settings(12)).unwrap();
        assert_eq!(logs.len(), 12);
        assert!(
            logs.last().unwrap().mean_loss < logs[0].mean_loss,
            "loss did not drop: {} -> {}",
            logs[0].mean_loss,
            logs.last().unwrap().mean_loss
        );
        assert!(logs.iter().all(|l| l.dev_score.is_some()));
    }

    #[test]
    fn identical_seeds_produce_bit_identical_models_and_logs() {
        let (_dir, dataset, model0) = tiny_setup();
        let train_idx = dataset.indices_in(Split::Train);
        let eval_idx = dataset.indices_in(Split::Test);

        let mut m1 = model0.clone();
        let mut m2 = model0.clone();
        let l1 = train_model(&mut m1, &dataset, &train_idx, &eval_idx, &settings(3)).unwrap();
        let l2 = train_model(&mut m2, &dataset, &train_idx, &eval_idx, &settings(3)).unwrap();
        assert_eq!(m1.to_flat(), m2.to_flat());
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
        }
    }

    #[test]
    fn empty_training_set_is_a_startup_error() {
        let (_dir, dataset, mut model) = tiny_setup();
        let err = train_model(&mut model, &dataset, &[], &[], &settings(1)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn unlabeled_eval_indices_yield_no_score() {
        let (_dir, dataset, mut model) = tiny_setup();
        let train_idx = dataset.indices_in(Split::Train);
        let logs = train_model(&mut model, &dataset, &train_idx, &[], &settings(1)).unwrap();
        assert!(logs[0].dev_score.is_none());
    }

    #[test]
    fn gradient_clipping_caps_the_global_norm() {
        let mut grads = vec![
            Array2::from_elem((2, 2), 3.0),
            Array2::from_elem((1, 2), 4.0),
        ];
        // norm = sqrt(4*9 + 2*16) = sqrt(68)
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
