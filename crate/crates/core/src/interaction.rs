//! Cross-task attention interaction.
//!
//! Each task branch queries the other branch's fused tokens, refines the
//! result through a second attention step that reuses the first result as
//! Key and Value, and finally adds the refined feature back onto its own
//! tokens under a learned logistic gate.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{ParamBinder, Tape, TensorId};
use crate::encoding::TaskTokens;
use crate::error::{Error, Result};

/// Projection weights for one multi-head attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub w_query: Array2<f64>,
    pub b_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub b_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub b_value: Array2<f64>,
    pub w_output: Array2<f64>,
    pub b_output: Array2<f64>,
}

impl AttentionParams {
    pub fn zeros(hidden: usize, n_heads: usize) -> Result<Self> {
        check_heads(hidden, n_heads)?;
        Ok(AttentionParams {
            n_heads,
            w_query: Array2::zeros((hidden, hidden)),
            b_query: Array2::zeros((1, hidden)),
            w_key: Array2::zeros((hidden, hidden)),
            b_key: Array2::zeros((1, hidden)),
            w_value: Array2::zeros((hidden, hidden)),
            b_value: Array2::zeros((1, hidden)),
            w_output: Array2::zeros((hidden, hidden)),
            b_output: Array2::zeros((1, hidden)),
        })
    }

    pub fn init(hidden: usize, n_heads: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        let mut p = Self::zeros(hidden, n_heads)?;
        let scale = 1.0 / (hidden as f64).sqrt();
        for w in [
            &mut p.w_query,
            &mut p.w_key,
            &mut p.w_value,
            &mut p.w_output,
        ] {
            w.mapv_inplace(|_| rng.gen_range(-scale..scale));
        }
        Ok(p)
    }

    pub fn hidden_size(&self) -> usize {
        self.w_query.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        check_heads(h, self.n_heads)?;
        for (name, w, shape) in [
            ("w_query", &self.w_query, (h, h)),
            ("w_key", &self.w_key, (h, h)),
            ("w_value", &self.w_value, (h, h)),
            ("w_output", &self.w_output, (h, h)),
            ("b_query", &self.b_query, (1, h)),
            ("b_key", &self.b_key, (1, h)),
            ("b_value", &self.b_value, (1, h)),
            ("b_output", &self.b_output, (1, h)),
        ] {
            if w.dim() != shape {
                return Err(Error::DimMismatch(format!(
                    "attention {name} has shape {:?}, expected {shape:?}",
                    w.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> AttentionIds {
        AttentionIds {
            n_heads: self.n_heads,
            hidden: self.hidden_size(),
            w_query: binder.bind(format!("{prefix}.w_query"), &self.w_query),
            b_query: binder.bind(format!("{prefix}.b_query"), &self.b_query),
            w_key: binder.bind(format!("{prefix}.w_key"), &self.w_key),
            b_key: binder.bind(format!("{prefix}.b_key"), &self.b_key),
            w_value: binder.bind(format!("{prefix}.w_value"), &self.w_value),
            b_value: binder.bind(format!("{prefix}.b_value"), &self.b_value),
            w_output: binder.bind(format!("{prefix}.w_output"), &self.w_output),
            b_output: binder.bind(format!("{prefix}.b_output"), &self.b_output),
        }
    }
}

fn check_heads(hidden: usize, n_heads: usize) -> Result<()> {
    if n_heads < 1 {
        return Err(Error::InvalidArgument("attention needs >= 1 head".into()));
    }
    if !hidden.is_multiple_of(n_heads) {
        return Err(Error::InvalidArgument(format!(
            "head count {n_heads} does not divide hidden size {hidden}"
        )));
    }
    Ok(())
}

/// Tape-side handles for one attention block's parameters.
#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub n_heads: usize,
    pub hidden: usize,
    pub w_query: TensorId,
    pub b_query: TensorId,
    pub w_key: TensorId,
    pub b_key: TensorId,
    pub w_value: TensorId,
    pub b_value: TensorId,
    pub w_output: TensorId,
    pub b_output: TensorId,
}

/// Attention result on the tape. `head_weights[h]` is the softmax node of
/// head `h` (one row per query, summing to 1).
pub struct AttentionGraph {
    pub output: TensorId,
    pub head_weights: Vec<TensorId>,
}

/// Builds scaled dot-product attention with per-head softmax, head
/// concatenation, and an output projection.
pub fn attention_graph(
    tape: &mut Tape,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    ids: &AttentionIds,
) -> AttentionGraph {
    let dh = ids.hidden / ids.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(query, ids.w_query);
    let q = tape.add_row(q, ids.b_query);
    let k = tape.matmul(key, ids.w_key);
    let k = tape.add_row(k, ids.b_key);
    let v = tape.matmul(value, ids.w_value);
    let v = tape.add_row(v, ids.b_value);

    let mut head_outputs = Vec::with_capacity(ids.n_heads);
    let mut head_weights = Vec::with_capacity(ids.n_heads);
    for h in 0..ids.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        let ctx = tape.matmul(weights, vh);
        head_outputs.push(ctx);
        head_weights.push(weights);
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    let out = tape.matmul(merged, ids.w_output);
    let output = tape.add_row(out, ids.b_output);
    AttentionGraph {
        output,
        head_weights,
    }
}

/// Attention output together with the per-head weight matrices, exposed so
/// the softmax distribution itself can be inspected.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub head_weights: Vec<Array2<f64>>,
}

/// Standard multi-head scaled dot-product attention over row-vector
/// sequences: `query` is n x H, `key` and `value` are m x H.
pub fn multi_head_attention(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    params.validate()?;
    let h = params.hidden_size();
    if query.nrows() < 1 || key.nrows() < 1 {
        return Err(Error::InvalidArgument(
            "attention needs at least one query and one key".into(),
        ));
    }
    if query.ncols() != h || key.ncols() != h || value.ncols() != h {
        return Err(Error::DimMismatch(format!(
            "attention inputs must have width {h}, got q={}, k={}, v={}",
            query.ncols(),
            key.ncols(),
            value.ncols()
        )));
    }
    if key.nrows() != value.nrows() {
        return Err(Error::DimMismatch(format!(
            "key has {} rows but value has {}",
            key.nrows(),
            value.nrows()
        )));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let v = tape.constant(value.clone());
    let mut binder = ParamBinder::new(&mut tape);
    let ids = params.bind(&mut binder, "attn");
    let graph = attention_graph(&mut tape, q, k, v, &ids);
    Ok(AttentionOutput {
        output: tape.value(graph.output).clone(),
        head_weights: graph
            .head_weights
            .iter()
            .map(|&w| tape.value(w).clone())
            .collect(),
    })
}

/// Gate projection: a linear map from the concatenated query and refined
/// feature (2H) down to H, squashed through a logistic.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl GateParams {
    pub fn zeros(hidden: usize) -> Self {
        GateParams {
            weight: Array2::zeros((2 * hidden, hidden)),
            bias: Array2::zeros((1, hidden)),
        }
    }

    pub fn init(hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut p = Self::zeros(hidden);
        let scale = 1.0 / (2.0 * hidden as f64).sqrt();
        p.weight.mapv_inplace(|_| rng.gen_range(-scale..scale));
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.weight.dim() != (2 * h, h) || self.bias.dim() != (1, h) {
            return Err(Error::DimMismatch(format!(
                "gate shapes {:?}/{:?} inconsistent with hidden {h}",
                self.weight.dim(),
                self.bias.dim()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut ParamBinder, prefix: &str) -> GateIds {
        GateIds {
            weight: binder.bind(format!("{prefix}.weight"), &self.weight),
            bias: binder.bind(format!("{prefix}.bias"), &self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateIds {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// The two interaction steps of one task branch plus the gated residual.
#[derive(Debug, Clone)]
pub struct InteractionState {
    /// First interaction result: own tokens attending over the other
    /// branch's tokens.
    pub first: Array2<f64>,
    /// Second result: own tokens attending over `first`.
    pub second: Array2<f64>,
    /// Logistic gate values, strictly inside (0, 1).
    pub gate: Array2<f64>,
    /// Final feature: tokens + gate * second.
    pub fused: Array2<f64>,
}

pub struct InteractionGraph {
    pub first: TensorId,
    pub second: TensorId,
    pub gate: TensorId,
    pub fused: TensorId,
}

pub fn interaction_graph(
    tape: &mut Tape,
    own_tokens: TensorId,
    other_tokens: TensorId,
    first_attn: &AttentionIds,
    second_attn: &AttentionIds,
    gate: &GateIds,
) -> InteractionGraph {
    let first = attention_graph(tape, own_tokens, other_tokens, other_tokens, first_attn).output;
    let second = attention_graph(tape, own_tokens, first, first, second_attn).output;
    let joined = tape.concat_cols(&[own_tokens, second]);
    let pre = tape.matmul(joined, gate.weight);
    let pre = tape.add_row(pre, gate.bias);
    let gate_values = tape.sigmoid(pre);
    let weighted = tape.mul(gate_values, second);
    let fused = tape.add(own_tokens, weighted);
    InteractionGraph {
        first,
        second,
        gate: gate_values,
        fused,
    }
}

/// Runs the full two-step interaction for one branch: `own` provides the
/// Query; `other` provides Key and Value for the first step.
pub fn cross_task_interact(
    own: &TaskTokens,
    other: &TaskTokens,
    first_attn: &AttentionParams,
    second_attn: &AttentionParams,
    gate: &GateParams,
) -> Result<InteractionState> {
    first_attn.validate()?;
    second_attn.validate()?;
    gate.validate()?;
    let h = first_attn.hidden_size();
    for (name, tokens) in [("own", own), ("other", other)] {
        if tokens.tokens.dim() != (3, h) {
            return Err(Error::DimMismatch(format!(
                "{name} tokens have shape {:?}, expected (3, {h})",
                tokens.tokens.dim()
            )));
        }
    }
    if second_attn.hidden_size() != h || gate.hidden_size() != h {
        return Err(Error::DimMismatch(
            "interaction parameter sizes disagree".into(),
        ));
    }
    let mut tape = Tape::new();
    let own_id = tape.constant(own.tokens.clone());
    let other_id = tape.constant(other.tokens.clone());
    let mut binder = ParamBinder::new(&mut tape);
    let a1 = first_attn.bind(&mut binder, "first");
    let a2 = second_attn.bind(&mut binder, "second");
    let g = gate.bind(&mut binder, "gate");
    let graph = interaction_graph(&mut tape, own_id, other_id, &a1, &a2, &g);
    Ok(InteractionState {
        first: tape.value(graph.first).clone(),
        second: tape.value(graph.second).clone(),
        gate: tape.value(graph.gate).clone(),
        fused: tape.value(graph.fused).clone(),
    })
}

/// Gated residual combination: `q + g * b` elementwise. Boundary gate
/// values are permitted for this pure helper.
pub fn gate_combine(
    q: &Array2<f64>,
    b: &Array2<f64>,
    g: &Array2<f64>,
) -> Result<Array2<f64>> {
    if q.dim() != b.dim() || q.dim() != g.dim() {
        return Err(Error::DimMismatch(format!(
            "gate_combine shapes disagree: q={:?}, b={:?}, g={:?}",
            q.dim(),
            b.dim(),
            g.dim()
        )));
    }
    Ok(q + &(g * b))
}

/// Mean over the three modality tokens, yielding the classifier feature.
pub fn pool_tokens(fused: &Array2<f64>) -> Result<Array2<f64>> {
    if fused.nrows() != 3 {
        return Err(Error::InvalidArgument(format!(
            "token pooling expects 3 rows, got {}",
            fused.nrows()
        )));
    }
    let mut out = Array2::zeros((1, fused.ncols()));
    for row in fused.rows() {
        for (j, &v) in row.iter().enumerate() {
            out[(0, j)] += v;
        }
    }
    out.mapv_inplace(|v| v / 3.0);
    Ok(out)
}
