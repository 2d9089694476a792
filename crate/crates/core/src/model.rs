//! The assembled two-branch model.
//!
//! Each task branch owns its own encoders, fusion layer, interaction
//! attention blocks, and gate; the branches share nothing but the input
//! embeddings. The forward pass is built on a [`Tape`] so training,
//! inference, and gradient checks all run through one implementation.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBinder, Tape, TensorId};
use crate::dataio::{LoadedSample, ModalityDims};
use crate::encoding::{
    add_gaussian_noise, lstm_maxpool_graph, text_conv_graph, FusionIds, FusionParams, LstmIds,
    LstmParams, TextConvIds, TextConvParams,
};
use crate::error::{Error, Result};
use crate::heads::{classify_graph, softmax, ClassifierIds, ClassifierParams, LossWeights};
use crate::interaction::{
    interaction_graph, AttentionIds, AttentionParams, GateIds, GateParams,
};

/// Everything needed to size the parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dims: ModalityDims,
    pub hidden: usize,
    pub fusion_heads: usize,
    pub interaction_heads: usize,
    pub emotion_classes: usize,
    pub intent_classes: usize,
    pub text_kernel: usize,
}

impl ModelDims {
    pub fn feed_forward_inner(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 {
            return Err(Error::InvalidArgument("hidden size must be >= 1".into()));
        }
        if self.fusion_heads < 1 || !self.hidden.is_multiple_of(self.fusion_heads) {
            return Err(Error::InvalidArgument(format!(
                "fusion heads {} must divide hidden size {}",
                self.fusion_heads, self.hidden
            )));
        }
        if self.interaction_heads < 1 || !self.hidden.is_multiple_of(self.interaction_heads) {
            return Err(Error::InvalidArgument(format!(
                "interaction heads {} must divide hidden size {}",
                self.interaction_heads, self.hidden
            )));
        }
        if self.emotion_classes < 2 || self.intent_classes < 2 {
            return Err(Error::InvalidArgument(
                "both tasks need at least 2 classes".into(),
            ));
        }
        if self.text_kernel < 1 {
            return Err(Error::InvalidArgument("text kernel must be >= 1".into()));
        }
        if self.input_dims.visual < 1 || self.input_dims.audio < 1 || self.input_dims.text < 1 {
            return Err(Error::InvalidArgument("input dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// One task branch's parameters.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub visual_encoder: LstmParams,
    pub audio_encoder: LstmParams,
    pub text_encoder: TextConvParams,
    pub fusion: FusionParams,
    pub first_interaction: AttentionParams,
    pub second_interaction: AttentionParams,
    pub gate: GateParams,
}

impl BranchParams {
    fn init(dims: &ModelDims, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(BranchParams {
            visual_encoder: LstmParams::init(dims.input_dims.visual, dims.hidden, rng),
            audio_encoder: LstmParams::init(dims.input_dims.audio, dims.hidden, rng),
            text_encoder: TextConvParams::init(
                dims.input_dims.text,
                dims.hidden,
                dims.text_kernel,
                rng,
            ),
            fusion: FusionParams::init(
                dims.hidden,
                dims.fusion_heads,
                dims.feed_forward_inner(),
                rng,
            )?,
            first_interaction: AttentionParams::init(dims.hidden, dims.interaction_heads, rng)?,
            second_interaction: AttentionParams::init(dims.hidden, dims.interaction_heads, rng)?,
            gate: GateParams::init(dims.hidden, rng),
        })
    }

    fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> BranchIds {
        BranchIds {
            visual_encoder: self
                .visual_encoder
                .bind(binder, &format!("{prefix}.visual_encoder")),
            audio_encoder: self
                .audio_encoder
                .bind(binder, &format!("{prefix}.audio_encoder")),
            text_encoder: self
                .text_encoder
                .bind(binder, &format!("{prefix}.text_encoder")),
            fusion: self.fusion.bind(binder, &format!("{prefix}.fusion")),
            first_interaction: self
                .first_interaction
                .bind(binder, &format!("{prefix}.first_interaction")),
            second_interaction: self
                .second_interaction
                .bind(binder, &format!("{prefix}.second_interaction")),
            gate: self.gate.bind(binder, &format!("{prefix}.gate")),
        }
    }
}

pub struct BranchIds {
    pub visual_encoder: LstmIds,
    pub audio_encoder: LstmIds,
    pub text_encoder: TextConvIds,
    pub fusion: FusionIds,
    pub first_interaction: AttentionIds,
    pub second_interaction: AttentionIds,
    pub gate: GateIds,
}

pub struct ModelIds {
    pub emotion: BranchIds,
    pub intent: BranchIds,
    pub classifier: ClassifierIds,
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub dims: ModelDims,
    pub emotion: BranchParams,
    pub intent: BranchParams,
    pub classifier: ClassifierParams,
}

/// Forward behavior: evaluation is deterministic; training adds input
/// noise and feature dropout driven by the supplied rng.
pub enum Mode<'r> {
    Eval,
    Train {
        noise_sigma: f64,
        dropout: f64,
        rng: &'r mut ChaCha20Rng,
    },
}

pub struct SampleLogits {
    pub emotion: TensorId,
    pub intent: TensorId,
}

impl JointModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(JointModel {
            dims,
            emotion: BranchParams::init(&dims, &mut rng)?,
            intent: BranchParams::init(&dims, &mut rng)?,
            classifier: ClassifierParams::init(
                dims.hidden,
                dims.emotion_classes,
                dims.intent_classes,
                &mut rng,
            ),
        })
    }

    pub fn bind(&self, binder: &mut ParamBinder) -> ModelIds {
        ModelIds {
            emotion: self.emotion.bind(binder, "emotion"),
            intent: self.intent.bind(binder, "intent"),
            classifier: self.classifier.bind(binder, "classifier"),
        }
    }

    /// Named views of every parameter array, in the same order `bind`
    /// registers them.
    pub fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (task, b) in [("emotion", &self.emotion), ("intent", &self.intent)] {
            for (name, enc) in [
                ("visual_encoder", &b.visual_encoder),
                ("audio_encoder", &b.audio_encoder),
            ] {
                out.push((format!("{task}.{name}.w_input"), &enc.w_input));
                out.push((format!("{task}.{name}.w_hidden"), &enc.w_hidden));
                out.push((format!("{task}.{name}.bias"), &enc.bias));
            }
            out.push((format!("{task}.text_encoder.weight"), &b.text_encoder.weight));
            out.push((format!("{task}.text_encoder.bias"), &b.text_encoder.bias));
            let f = &b.fusion;
            for (name, w) in [
                ("attn.w_query", &f.attention.w_query),
                ("attn.b_query", &f.attention.b_query),
                ("attn.w_key", &f.attention.w_key),
                ("attn.b_key", &f.attention.b_key),
                ("attn.w_value", &f.attention.w_value),
                ("attn.b_value", &f.attention.b_value),
                ("attn.w_output", &f.attention.w_output),
                ("attn.b_output", &f.attention.b_output),
                ("ff_w1", &f.ff_w1),
                ("ff_b1", &f.ff_b1),
                ("ff_w2", &f.ff_w2),
                ("ff_b2", &f.ff_b2),
                ("norm1_gamma", &f.norm1_gamma),
                ("norm1_beta", &f.norm1_beta),
                ("norm2_gamma", &f.norm2_gamma),
                ("norm2_beta", &f.norm2_beta),
            ] {
                out.push((format!("{task}.fusion.{name}"), w));
            }
            for (step, attn) in [
                ("first_interaction", &b.first_interaction),
                ("second_interaction", &b.second_interaction),
            ] {
                for (name, w) in [
                    ("w_query", &attn.w_query),
                    ("b_query", &attn.b_query),
                    ("w_key", &attn.w_key),
                    ("b_key", &attn.b_key),
                    ("w_value", &attn.w_value),
                    ("b_value", &attn.b_value),
                    ("w_output", &attn.w_output),
                    ("b_output", &attn.b_output),
                ] {
                    out.push((format!("{task}.{step}.{name}"), w));
                }
            }
            out.push((format!("{task}.gate.weight"), &b.gate.weight));
            out.push((format!("{task}.gate.bias"), &b.gate.bias));
        }
        out.push(("classifier.emotion_weight".into(), &self.classifier.emotion_weight));
        out.push(("classifier.emotion_bias".into(), &self.classifier.emotion_bias));
        out.push(("classifier.intent_weight".into(), &self.classifier.intent_weight));
        out.push(("classifier.intent_bias".into(), &self.classifier.intent_bias));
        out
    }

    /// Mutable counterpart of [`JointModel::arrays`], in identical order.
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = Vec::new();
        for (task, b) in [
            ("emotion", &mut self.emotion),
            ("intent", &mut self.intent),
        ] {
            for (name, enc) in [
                ("visual_encoder", &mut b.visual_encoder),
                ("audio_encoder", &mut b.audio_encoder),
            ] {
                out.push((format!("{task}.{name}.w_input"), &mut enc.w_input));
                out.push((format!("{task}.{name}.w_hidden"), &mut enc.w_hidden));
                out.push((format!("{task}.{name}.bias"), &mut enc.bias));
            }
            out.push((
                format!("{task}.text_encoder.weight"),
                &mut b.text_encoder.weight,
            ));
            out.push((format!("{task}.text_encoder.bias"), &mut b.text_encoder.bias));
            let f = &mut b.fusion;
            for (name, w) in [
                ("attn.w_query", &mut f.attention.w_query),
                ("attn.b_query", &mut f.attention.b_query),
                ("attn.w_key", &mut f.attention.w_key),
                ("attn.b_key", &mut f.attention.b_key),
                ("attn.w_value", &mut f.attention.w_value),
                ("attn.b_value", &mut f.attention.b_value),
                ("attn.w_output", &mut f.attention.w_output),
                ("attn.b_output", &mut f.attention.b_output),
                ("ff_w1", &mut f.ff_w1),
                ("ff_b1", &mut f.ff_b1),
                ("ff_w2", &mut f.ff_w2),
                ("ff_b2", &mut f.ff_b2),
                ("norm1_gamma", &mut f.norm1_gamma),
                ("norm1_beta", &mut f.norm1_beta),
                ("norm2_gamma", &mut f.norm2_gamma),
                ("norm2_beta", &mut f.norm2_beta),
            ] {
                out.push((format!("{task}.fusion.{name}"), w));
            }
            for (step, attn) in [
                ("first_interaction", &mut b.first_interaction),
                ("second_interaction", &mut b.second_interaction),
            ] {
                for (name, w) in [
                    ("w_query", &mut attn.w_query),
                    ("b_query", &mut attn.b_query),
                    ("w_key", &mut attn.w_key),
                    ("b_key", &mut attn.b_key),
                    ("w_value", &mut attn.w_value),
                    ("b_value", &mut attn.b_value),
                    ("w_output", &mut attn.w_output),
                    ("b_output", &mut attn.b_output),
                ] {
                    out.push((format!("{task}.{step}.{name}"), w));
                }
            }
            out.push((format!("{task}.gate.weight"), &mut b.gate.weight));
            out.push((format!("{task}.gate.bias"), &mut b.gate.bias));
        }
        out.push((
            "classifier.emotion_weight".into(),
            &mut self.classifier.emotion_weight,
        ));
        out.push((
            "classifier.emotion_bias".into(),
            &mut self.classifier.emotion_bias,
        ));
        out.push((
            "classifier.intent_weight".into(),
            &mut self.classifier.intent_weight,
        ));
        out.push((
            "classifier.intent_bias".into(),
            &mut self.classifier.intent_bias,
        ));
        out
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, a) in self.arrays() {
            out.extend(a.iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::DimMismatch(format!(
                "flat vector has {} values, model holds {total}",
                flat.len()
            )));
        }
        let mut at = 0;
        for (_, a) in self.arrays_mut() {
            for v in a.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    fn check_sample_dims(&self, sample: &LoadedSample) -> Result<()> {
        let dims = &self.dims.input_dims;
        for (name, seq, want) in [
            ("visual", &sample.visual, dims.visual),
            ("audio", &sample.audio, dims.audio),
            ("text", &sample.text, dims.text),
        ] {
            if seq.ncols() != want {
                return Err(Error::DimMismatch(format!(
                    "sample '{}': {name} dim {} does not match model input dim {want}",
                    sample.id,
                    seq.ncols()
                )));
            }
            if seq.nrows() < 1 {
                return Err(Error::InvalidArgument(format!(
                    "sample '{}': empty {name} sequence",
                    sample.id
                )));
            }
        }
        Ok(())
    }

    /// Builds the per-sample forward graph and returns the two logits
    /// nodes. Both branches consume the same (possibly noised) inputs.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        ids: &ModelIds,
        sample: &LoadedSample,
        mode: &mut Mode,
    ) -> Result<SampleLogits> {
        self.check_sample_dims(sample)?;
        let (visual, audio, text) = match mode {
            Mode::Eval => (
                sample.visual.clone(),
                sample.audio.clone(),
                sample.text.clone(),
            ),
            Mode::Train {
                noise_sigma, rng, ..
            } => (
                add_gaussian_noise(&sample.visual, *noise_sigma, true, rng)?,
                add_gaussian_noise(&sample.audio, *noise_sigma, true, rng)?,
                add_gaussian_noise(&sample.text, *noise_sigma, true, rng)?,
            ),
        };
        let visual_rows: Vec<TensorId> = (0..visual.nrows())
            .map(|t| tape.constant(visual.row(t).to_owned().insert_axis(Axis(0))))
            .collect();
        let audio_rows: Vec<TensorId> = (0..audio.nrows())
            .map(|t| tape.constant(audio.row(t).to_owned().insert_axis(Axis(0))))
            .collect();
        let text_mat = tape.constant(text);

        let mut branch_tokens = Vec::with_capacity(2);
        for branch in [&ids.emotion, &ids.intent] {
            let v = lstm_maxpool_graph(tape, &visual_rows, &branch.visual_encoder);
            let a = lstm_maxpool_graph(tape, &audio_rows, &branch.audio_encoder);
            let t = text_conv_graph(tape, text_mat, &branch.text_encoder);
            let stacked = tape.concat_rows(&[v, a, t]);
            branch_tokens.push(fusion_graph_entry(tape, stacked, branch));
        }
        let (emotion_tokens, intent_tokens) = (branch_tokens[0], branch_tokens[1]);

        let emotion_state = interaction_graph(
            tape,
            emotion_tokens,
            intent_tokens,
            &ids.emotion.first_interaction,
            &ids.emotion.second_interaction,
            &ids.emotion.gate,
        );
        let intent_state = interaction_graph(
            tape,
            intent_tokens,
            emotion_tokens,
            &ids.intent.first_interaction,
            &ids.intent.second_interaction,
            &ids.intent.gate,
        );

        let mut pooled_emotion = tape.mean_rows(emotion_state.fused);
        let mut pooled_intent = tape.mean_rows(intent_state.fused);
        if let Mode::Train { dropout, rng, .. } = mode {
            if *dropout > 0.0 {
                pooled_emotion = apply_dropout(tape, pooled_emotion, *dropout, rng);
                pooled_intent = apply_dropout(tape, pooled_intent, *dropout, rng);
            }
        }
        let (emotion, intent) =
            classify_graph(tape, pooled_emotion, pooled_intent, &ids.classifier);
        Ok(SampleLogits { emotion, intent })
    }

    /// Scalar joint loss node for one labeled sample.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        ids: &ModelIds,
        sample: &LoadedSample,
        weights: &LossWeights,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let emotion_label = sample.emotion_label.ok_or_else(|| {
            Error::InvalidArgument(format!("sample '{}' has no emotion label", sample.id))
        })?;
        let intent_label = sample.intent_label.ok_or_else(|| {
            Error::InvalidArgument(format!("sample '{}' has no intent label", sample.id))
        })?;
        if emotion_label >= self.dims.emotion_classes || intent_label >= self.dims.intent_classes
        {
            return Err(Error::InvalidArgument(format!(
                "sample '{}' labels ({emotion_label}, {intent_label}) out of range",
                sample.id
            )));
        }
        let logits = self.forward_graph(tape, ids, sample, mode)?;
        let ce_e = tape.cross_entropy(logits.emotion, emotion_label);
        let ce_i = tape.cross_entropy(logits.intent, intent_label);
        let we = tape.scale(ce_e, weights.emotion);
        let wi = tape.scale(ce_i, weights.intent);
        Ok(tape.add(we, wi))
    }

    /// Evaluation-mode class probabilities for one sample.
    pub fn predict(&self, sample: &LoadedSample) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&mut tape);
        let ids = self.bind(&mut binder);
        let logits = self.forward_graph(&mut tape, &ids, sample, &mut Mode::Eval)?;
        let emotion = softmax(tape.value(logits.emotion).row(0).as_slice().unwrap())?;
        let intent = softmax(tape.value(logits.intent).row(0).as_slice().unwrap())?;
        Ok((emotion, intent))
    }
}

fn fusion_graph_entry(tape: &mut Tape, stacked: TensorId, branch: &BranchIds) -> TensorId {
    crate::encoding::fusion_graph(tape, stacked, &branch.fusion)
}

/// Inverted dropout: surviving features are scaled by 1/(1-p) so the
/// expected activation is unchanged.
fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    p: f64,
    rng: &mut ChaCha20Rng,
) -> TensorId {
    let shape = tape.value(x).dim();
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
