//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is a write-once list of nodes: leaves hold inputs or
//! parameters, interior nodes hold the result of an operation together with
//! the ids of its inputs. [`Tape::backward`] walks the list in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! parameter leaf.
//!
//! All shapes are two-dimensional; vectors are 1 x n rows. Everything is
//! f64 so that finite-difference checks can run at tight tolerances.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// (n x m) + broadcast of a (1 x m) row.
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    /// Column-wise max over rows; produces 1 x m. Ties resolve to the
    /// first (lowest-index) row.
    MaxRows(TensorId),
    MeanRows(TensorId),
    /// Sliding windows of `width` rows, flattened row-major into columns.
    Unfold {
        x: TensorId,
        width: usize,
    },
    /// Stable cross-entropy of a 1 x C logits row against a class index.
    CrossEntropy {
        logits: TensorId,
        label: usize,
    },
    SumAll(TensorId),
    SumN(Vec<TensorId>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node, if the node
    /// participates in the differentiated subgraph.
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient with a zero fallback of the given shape.
    pub fn get_or_zeros(&self, id: TensorId, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// Registers parameter arrays on a tape, remembering the name and id of
/// each so gradients can be read back in registration order.
pub struct ParamBinder<'t> {
    pub tape: &'t mut Tape,
    bound: Vec<(String, TensorId)>,
}

impl<'t> ParamBinder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        ParamBinder {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &Array2<f64>) -> TensorId {
        let id = self.tape.param(value.clone());
        self.bound.push((name.into(), id));
        id
    }

    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.bound
    }

    /// Consumes the binder, releasing its tape borrow.
    pub fn into_bound(self) -> Vec<(String, TensorId)> {
        self.bound
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite tape value");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; gradients accumulate here.
    pub fn param(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).dot(self.value(b));
        let needs = self.any_needs_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).t().to_owned();
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Transpose(x), needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Adds a 1 x m row to every row of an n x m matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        assert_eq!(self.shape(row).0, 1, "add_row: rhs must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + &self.value(row).row(0);
        let needs = self.any_needs_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let value = self.value(x) * c;
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(f64::tanh);
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Relu(x), needs)
    }

    /// Shift-stable softmax applied to every row independently.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    /// Row-wise layer normalization with learned scale and shift
    /// (`gamma`, `beta` are 1 x m).
    pub fn layer_norm_rows(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, m), "layer_norm: beta shape");
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..m {
                row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.any_needs_grad(&[x, gamma, beta]);
        self.push(value, Op::LayerNormRows { x, gamma, beta }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.nrows();
            value
                .slice_mut(ndarray::s![at..at + n, ..])
                .assign(v);
            at += n;
        }
        let needs = self.any_needs_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            let m = v.ncols();
            value
                .slice_mut(ndarray::s![.., at..at + m])
                .assign(v);
            at += m;
        }
        let needs = self.any_needs_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let value = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::SliceCols { x, start, len }, needs)
    }

    pub fn max_rows(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let (n, m) = v.dim();
        assert!(n >= 1, "max_rows: empty input");
        let mut out = Array2::zeros((1, m));
        for j in 0..m {
            let mut best = v[(0, j)];
            for i in 1..n {
                if v[(i, j)] > best {
                    best = v[(i, j)];
                }
            }
            out[(0, j)] = best;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::MaxRows(x), needs)
    }

    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let n = v.nrows();
        assert!(n >= 1, "mean_rows: empty input");
        let out = v
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::MeanRows(x), needs)
    }

    /// Stacks the `width`-row sliding windows of x (T x D) into a
    /// (T - width + 1) x (width * D) matrix, windows flattened row-major.
    pub fn unfold(&mut self, x: TensorId, width: usize) -> TensorId {
        let v = self.value(x);
        let (t, d) = v.dim();
        assert!(width >= 1 && width <= t, "unfold: invalid window width");
        let positions = t - width + 1;
        let mut out = Array2::zeros((positions, width * d));
        for p in 0..positions {
            for w in 0..width {
                for j in 0..d {
                    out[(p, w * d + j)] = v[(p + w, j)];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Unfold { x, width }, needs)
    }

    /// Negative log softmax probability of `label`, computed via
    /// a shifted log-sum-exp. Produces a 1 x 1 scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> TensorId {
        let v = self.value(logits);
        assert_eq!(v.nrows(), 1, "cross_entropy: logits must be a single row");
        assert!(label < v.ncols(), "cross_entropy: label out of range");
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        let value = Array2::from_elem((1, 1), lse - v[(0, label)]);
        let needs = self.nodes[logits.0].needs_grad;
        self.push(value, Op::CrossEntropy { logits, label }, needs)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::SumAll(x), needs)
    }

    /// Element-wise sum of same-shaped tensors.
    pub fn sum_n(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            assert_eq!(value.dim(), self.shape(p), "sum_n: shape mismatch");
            value += self.value(p);
        }
        let needs = self.any_needs_grad(parts);
        self.push(value, Op::SumN(parts.to_vec()), needs)
    }

    /// Reverse pass from a scalar root. Gradients flow only into nodes that
    /// depend on a parameter leaf.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::InvalidArgument(
                "backward root must be a 1x1 scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(upstream);
                continue;
            }
            self.accumulate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], id: TensorId, delta: Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match grads[id.0] {
            Some(ref mut g) => *g += &delta,
            None => grads[id.0] = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match self.nodes[idx].op.clone() {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = up.dot(&self.value(b).t());
                let db = self.value(a).t().dot(up);
                self.add_grad(grads, a, da);
                self.add_grad(grads, b, db);
            }
            Op::Transpose(x) => {
                self.add_grad(grads, x, up.t().to_owned());
            }
            Op::Add(a, b) => {
                self.add_grad(grads, a, up.clone());
                self.add_grad(grads, b, up.clone());
            }
            Op::AddRow(a, row) => {
                self.add_grad(grads, a, up.clone());
                let summed = up.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(grads, row, summed);
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, a, up * self.value(b));
                self.add_grad(grads, b, up * self.value(a));
            }
            Op::Scale(x, c) => {
                self.add_grad(grads, x, up * c);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                self.add_grad(grads, x, up * y * &y.mapv(|v| 1.0 - v));
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                self.add_grad(grads, x, up * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(x) => {
                let mask = self.value(x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.add_grad(grads, x, up * &mask);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = up * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                self.add_grad(grads, x, dx);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xv = self.value(x);
                let g = self.value(gamma).row(0).to_owned();
                let (n, m) = xv.dim();
                let mut dx = Array2::zeros((n, m));
                let mut dgamma = Array2::zeros((1, m));
                let mut dbeta = Array2::zeros((1, m));
                for i in 0..n {
                    let row = xv.row(i);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dy = up.row(i);
                    let mut dxhat = vec![0.0; m];
                    for j in 0..m {
                        dgamma[(0, j)] += dy[j] * xhat[j];
                        dbeta[(0, j)] += dy[j];
                        dxhat[j] = dy[j] * g[j];
                    }
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dx[(i, j)] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.add_grad(grads, x, dx);
                self.add_grad(grads, gamma, dgamma);
                self.add_grad(grads, beta, dbeta);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.shape(p).0;
                    let slice = up.slice(ndarray::s![at..at + n, ..]).to_owned();
                    self.add_grad(grads, p, slice);
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let m = self.shape(p).1;
                    let slice = up.slice(ndarray::s![.., at..at + m]).to_owned();
                    self.add_grad(grads, p, slice);
                    at += m;
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Array2::zeros(self.shape(x));
                dx.slice_mut(ndarray::s![.., start..start + len])
                    .assign(up);
                self.add_grad(grads, x, dx);
            }
            Op::MaxRows(x) => {
                let v = self.value(x);
                let (n, m) = v.dim();
                let mut dx = Array2::zeros((n, m));
                for j in 0..m {
                    let mut best = 0;
                    for i in 1..n {
                        if v[(i, j)] > v[(best, j)] {
                            best = i;
                        }
                    }
                    dx[(best, j)] = up[(0, j)];
                }
                self.add_grad(grads, x, dx);
            }
            Op::MeanRows(x) => {
                let (n, m) = self.shape(x);
                let mut dx = Array2::zeros((n, m));
                for i in 0..n {
                    for j in 0..m {
                        dx[(i, j)] = up[(0, j)] / n as f64;
                    }
                }
                self.add_grad(grads, x, dx);
            }
            Op::Unfold { x, width } => {
                let (t, d) = self.shape(x);
                let positions = t - width + 1;
                let mut dx = Array2::zeros((t, d));
                for p in 0..positions {
                    for w in 0..width {
                        for j in 0..d {
                            dx[(p + w, j)] += up[(p, w * d + j)];
                        }
                    }
                }
                self.add_grad(grads, x, dx);
            }
            Op::CrossEntropy { logits, label } => {
                let l = self.value(logits);
                let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = l.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut dl = Array2::zeros(l.dim());
                for (j, &e) in exps.iter().enumerate() {
                    let p = e / sum;
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    dl[(0, j)] = up[(0, 0)] * (p - onehot);
                }
                self.add_grad(grads, logits, dl);
            }
            Op::SumAll(x) => {
                let dx = Array2::from_elem(self.shape(x), up[(0, 0)]);
                self.add_grad(grads, x, dx);
            }
            Op::SumN(parts) => {
                for p in parts {
                    self.add_grad(grads, p, up.clone());
                }
            }
        }
    }
}
