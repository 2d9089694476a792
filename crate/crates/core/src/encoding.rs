//! Per-modality encoders and the per-task fusion layer.
//!
//! Visual and audio sequences go through a single-layer unidirectional
//! LSTM followed by an elementwise max over the hidden states; text goes
//! through a single-layer 1-D convolution with ReLU and max-over-time.
//! The three resulting tokens are fused by one pre-norm transformer
//! encoder layer per task branch.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamBinder, Tape, TensorId};
use crate::error::{Error, Result};
use crate::interaction::{attention_graph, AttentionIds, AttentionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Emotion,
    Intent,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Emotion, Task::Intent];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Emotion => "emotion",
            Task::Intent => "intent",
        }
    }
}

/// The fused 3-token representation of one task branch; rows are fixed as
/// [visual, audio, text].
#[derive(Debug, Clone)]
pub struct TaskTokens {
    pub task: Task,
    pub tokens: Array2<f64>,
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma` in
/// training mode; identity otherwise. Draws consume the rng in row-major
/// order, so a fixed seed state reproduces the output bit-for-bit.
pub fn add_gaussian_noise(
    data: &Array2<f64>,
    sigma: f64,
    training: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Array2<f64>> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if !training || sigma == 0.0 {
        return Ok(data.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = data.clone();
    for v in out.iter_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Single-layer LSTM weights with the four gates stacked column-wise in
/// the order [input, forget, cell, output].
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// input_dim x 4H
    pub w_input: Array2<f64>,
    /// H x 4H
    pub w_hidden: Array2<f64>,
    /// 1 x 4H
    pub bias: Array2<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_input: Array2::zeros((input_dim, 4 * hidden)),
            w_hidden: Array2::zeros((hidden, 4 * hidden)),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let scale = 1.0 / (hidden as f64).sqrt();
        p.w_input.mapv_inplace(|_| rng.gen_range(-scale..scale));
        p.w_hidden.mapv_inplace(|_| rng.gen_range(-scale..scale));
        // start with an open forget gate
        for j in hidden..2 * hidden {
            p.bias[(0, j)] = 1.0;
        }
        p
    }

    pub fn input_size(&self) -> usize {
        self.w_input.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.w_input.ncols() != 4 * h
            || self.w_hidden.dim() != (h, 4 * h)
            || self.bias.dim() != (1, 4 * h)
        {
            return Err(Error::DimMismatch(format!(
                "lstm shapes {:?}/{:?}/{:?} are inconsistent",
                self.w_input.dim(),
                self.w_hidden.dim(),
                self.bias.dim()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> LstmIds {
        LstmIds {
            hidden: self.hidden_size(),
            w_input: binder.bind(format!("{prefix}.w_input"), &self.w_input),
            w_hidden: binder.bind(format!("{prefix}.w_hidden"), &self.w_hidden),
            bias: binder.bind(format!("{prefix}.bias"), &self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmIds {
    pub hidden: usize,
    pub w_input: TensorId,
    pub w_hidden: TensorId,
    pub bias: TensorId,
}

/// Unrolls the LSTM over the per-step input rows and max-pools the hidden
/// states column-wise. Returns a 1 x H node.
pub fn lstm_maxpool_graph(tape: &mut Tape, steps: &[TensorId], ids: &LstmIds) -> TensorId {
    assert!(!steps.is_empty(), "lstm needs at least one step");
    let h = ids.hidden;
    let mut hidden = tape.constant(Array2::zeros((1, h)));
    let mut cell = tape.constant(Array2::zeros((1, h)));
    let mut states = Vec::with_capacity(steps.len());
    for &x in steps {
        let from_input = tape.matmul(x, ids.w_input);
        let from_hidden = tape.matmul(hidden, ids.w_hidden);
        let pre = tape.add(from_input, from_hidden);
        let pre = tape.add(pre, ids.bias);
        let i_pre = tape.slice_cols(pre, 0, h);
        let f_pre = tape.slice_cols(pre, h, h);
        let g_pre = tape.slice_cols(pre, 2 * h, h);
        let o_pre = tape.slice_cols(pre, 3 * h, h);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let kept = tape.mul(f, cell);
        let written = tape.mul(i, g);
        cell = tape.add(kept, written);
        let squashed = tape.tanh(cell);
        hidden = tape.mul(o, squashed);
        states.push(hidden);
    }
    let stacked = tape.concat_rows(&states);
    tape.max_rows(stacked)
}

/// Runs the LSTM encoder over a T x D sequence and max-pools over time.
pub fn recurrent_encode(seq: &Array2<f64>, params: &LstmParams) -> Result<Array2<f64>> {
    params.validate()?;
    if seq.nrows() < 1 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if seq.ncols() != params.input_size() {
        return Err(Error::DimMismatch(format!(
            "sequence dim {} does not match encoder input size {}",
            seq.ncols(),
            params.input_size()
        )));
    }
    let mut tape = Tape::new();
    let steps: Vec<TensorId> = (0..seq.nrows())
        .map(|t| tape.constant(seq.row(t).to_owned().insert_axis(ndarray::Axis(0))))
        .collect();
    let mut binder = ParamBinder::new(&mut tape);
    let ids = params.bind(&mut binder, "lstm");
    let out = lstm_maxpool_graph(&mut tape, &steps, &ids);
    Ok(tape.value(out).clone())
}

/// Single-layer 1-D convolution over time for text embeddings.
///
/// The kernel covers `width` consecutive steps; when a sequence is shorter
/// than the kernel, only the leading `T` rows of each filter are applied
/// (the width is clamped to T).
#[derive(Debug, Clone)]
pub struct TextConvParams {
    /// (width * input_dim) x H, window offsets stacked row-major.
    pub weight: Array2<f64>,
    /// 1 x H
    pub bias: Array2<f64>,
    pub width: usize,
    pub input_dim: usize,
}

impl TextConvParams {
    pub fn zeros(input_dim: usize, hidden: usize, width: usize) -> Self {
        TextConvParams {
            weight: Array2::zeros((width * input_dim, hidden)),
            bias: Array2::zeros((1, hidden)),
            width,
            input_dim,
        }
    }

    pub fn init(input_dim: usize, hidden: usize, width: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden, width);
        let scale = 1.0 / ((width * input_dim) as f64).sqrt();
        p.weight.mapv_inplace(|_| rng.gen_range(-scale..scale));
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 {
            return Err(Error::InvalidArgument("kernel width must be >= 1".into()));
        }
        if self.weight.nrows() != self.width * self.input_dim
            || self.bias.dim() != (1, self.hidden_size())
        {
            return Err(Error::DimMismatch(format!(
                "text conv shapes {:?}/{:?} inconsistent with width {} and input dim {}",
                self.weight.dim(),
                self.bias.dim(),
                self.width,
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> TextConvIds {
        TextConvIds {
            width: self.width,
            input_dim: self.input_dim,
            weight: binder.bind(format!("{prefix}.weight"), &self.weight),
            bias: binder.bind(format!("{prefix}.bias"), &self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextConvIds {
    pub width: usize,
    pub input_dim: usize,
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Valid-padding convolution + ReLU + max over time. `input` is a T x D
/// constant node. Returns a 1 x H node.
pub fn text_conv_graph(tape: &mut Tape, input: TensorId, ids: &TextConvIds) -> TensorId {
    let t = tape.value(input).nrows();
    let width = ids.width.min(t);
    let weight = if width == ids.width {
        ids.weight
    } else {
        // sequence shorter than the kernel: clamp to the leading rows
        tape.slice_rows_of_weight(ids.weight, width * ids.input_dim)
    };
    let windows = tape.unfold(input, width);
    let pre = tape.matmul(windows, weight);
    let pre = tape.add_row(pre, ids.bias);
    let activated = tape.relu(pre);
    tape.max_rows(activated)
}

pub fn text_conv_encode(seq: &Array2<f64>, params: &TextConvParams) -> Result<Array2<f64>> {
    params.validate()?;
    if seq.nrows() < 1 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if seq.ncols() != params.input_dim {
        return Err(Error::DimMismatch(format!(
            "sequence dim {} does not match conv input dim {}",
            seq.ncols(),
            params.input_dim
        )));
    }
    let mut tape = Tape::new();
    let input = tape.constant(seq.clone());
    let mut binder = ParamBinder::new(&mut tape);
    let ids = params.bind(&mut binder, "conv");
    let out = text_conv_graph(&mut tape, input, &ids);
    Ok(tape.value(out).clone())
}

/// One pre-norm transformer encoder layer: self-attention and a ReLU
/// feed-forward block, each behind a residual connection.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub attention: AttentionParams,
    /// H x F
    pub ff_w1: Array2<f64>,
    /// 1 x F
    pub ff_b1: Array2<f64>,
    /// F x H
    pub ff_w2: Array2<f64>,
    /// 1 x H
    pub ff_b2: Array2<f64>,
    pub norm1_gamma: Array2<f64>,
    pub norm1_beta: Array2<f64>,
    pub norm2_gamma: Array2<f64>,
    pub norm2_beta: Array2<f64>,
}

impl FusionParams {
    pub fn zeros(hidden: usize, n_heads: usize, ff_inner: usize) -> Result<Self> {
        Ok(FusionParams {
            attention: AttentionParams::zeros(hidden, n_heads)?,
            ff_w1: Array2::zeros((hidden, ff_inner)),
            ff_b1: Array2::zeros((1, ff_inner)),
            ff_w2: Array2::zeros((ff_inner, hidden)),
            ff_b2: Array2::zeros((1, hidden)),
            norm1_gamma: Array2::ones((1, hidden)),
            norm1_beta: Array2::zeros((1, hidden)),
            norm2_gamma: Array2::ones((1, hidden)),
            norm2_beta: Array2::zeros((1, hidden)),
        })
    }

    pub fn init(
        hidden: usize,
        n_heads: usize,
        ff_inner: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(hidden, n_heads, ff_inner)?;
        p.attention = AttentionParams::init(hidden, n_heads, rng)?;
        let s1 = 1.0 / (hidden as f64).sqrt();
        let s2 = 1.0 / (ff_inner as f64).sqrt();
        p.ff_w1.mapv_inplace(|_| rng.gen_range(-s1..s1));
        p.ff_w2.mapv_inplace(|_| rng.gen_range(-s2..s2));
        Ok(p)
    }

    pub fn hidden_size(&self) -> usize {
        self.attention.hidden_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        let h = self.hidden_size();
        let f = self.ff_w1.ncols();
        if self.ff_w1.dim() != (h, f)
            || self.ff_b1.dim() != (1, f)
            || self.ff_w2.dim() != (f, h)
            || self.ff_b2.dim() != (1, h)
        {
            return Err(Error::DimMismatch("fusion feed-forward shapes".into()));
        }
        for g in [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.norm2_gamma,
            &self.norm2_beta,
        ] {
            if g.dim() != (1, h) {
                return Err(Error::DimMismatch("fusion layer-norm shapes".into()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> FusionIds {
        FusionIds {
            attention: self.attention.bind(binder, &format!("{prefix}.attn")),
            ff_w1: binder.bind(format!("{prefix}.ff_w1"), &self.ff_w1),
            ff_b1: binder.bind(format!("{prefix}.ff_b1"), &self.ff_b1),
            ff_w2: binder.bind(format!("{prefix}.ff_w2"), &self.ff_w2),
            ff_b2: binder.bind(format!("{prefix}.ff_b2"), &self.ff_b2),
            norm1_gamma: binder.bind(format!("{prefix}.norm1_gamma"), &self.norm1_gamma),
            norm1_beta: binder.bind(format!("{prefix}.norm1_beta"), &self.norm1_beta),
            norm2_gamma: binder.bind(format!("{prefix}.norm2_gamma"), &self.norm2_gamma),
            norm2_beta: binder.bind(format!("{prefix}.norm2_beta"), &self.norm2_beta),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionIds {
    pub attention: AttentionIds,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
    pub norm1_gamma: TensorId,
    pub norm1_beta: TensorId,
    pub norm2_gamma: TensorId,
    pub norm2_beta: TensorId,
}

/// Applies the fusion layer to a stacked token matrix node (3 x H).
pub fn fusion_graph(tape: &mut Tape, tokens: TensorId, ids: &FusionIds) -> TensorId {
    let normed = tape.layer_norm_rows(tokens, ids.norm1_gamma, ids.norm1_beta);
    let attended = attention_graph(tape, normed, normed, normed, &ids.attention).output;
    let after_attn = tape.add(tokens, attended);

    let normed2 = tape.layer_norm_rows(after_attn, ids.norm2_gamma, ids.norm2_beta);
    let inner = tape.matmul(normed2, ids.ff_w1);
    let inner = tape.add_row(inner, ids.ff_b1);
    let inner = tape.relu(inner);
    let outer = tape.matmul(inner, ids.ff_w2);
    let outer = tape.add_row(outer, ids.ff_b2);
    tape.add(after_attn, outer)
}

/// Stacks the visual, audio, and text tokens (1 x H each, in that row
/// order) and runs one fusion layer, returning the full 3 x H matrix.
pub fn fuse_modalities(
    visual: &Array2<f64>,
    audio: &Array2<f64>,
    text: &Array2<f64>,
    params: &FusionParams,
    task: Task,
) -> Result<TaskTokens> {
    params.validate()?;
    let h = params.hidden_size();
    for (name, v) in [("visual", visual), ("audio", audio), ("text", text)] {
        if v.dim() != (1, h) {
            return Err(Error::DimMismatch(format!(
                "{name} token has shape {:?}, expected (1, {h})",
                v.dim()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} token contains non-finite values"
            )));
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(visual.clone());
    let a = tape.constant(audio.clone());
    let t = tape.constant(text.clone());
    let stacked = tape.concat_rows(&[v, a, t]);
    let mut binder = ParamBinder::new(&mut tape);
    let ids = params.bind(&mut binder, "fusion");
    let out = fusion_graph(&mut tape, stacked, &ids);
    Ok(TaskTokens {
        task,
        tokens: tape.value(out).clone(),
    })
}

impl Tape {
    /// Leading-rows view of a weight matrix, used when a conv kernel is
    /// clamped to a short sequence.
    fn slice_rows_of_weight(&mut self, weight: TensorId, rows: usize) -> TensorId {
        // transpose, take columns, transpose back: reuses the column slice op
        let t = self.transpose(weight);
        let cut = self.slice_cols(t, 0, rows);
        self.transpose(cut)
    }
}
