//! Independent oracle implementations shared by the integration suites.
//! Everything here is written with explicit loops, deliberately avoiding
//! the library's own computation paths.

use emint::interaction::AttentionParams;
use ndarray::Array2;

/// Explicit-loop multi-head scaled dot-product attention.
#[allow(clippy::needless_range_loop)]
pub fn attention_oracle(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    p: &AttentionParams,
) -> Array2<f64> {
    let h = p.hidden_size();
    let dh = h / p.n_heads;
    let n = q.nrows();
    let m = k.nrows();
    let project = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| -> Vec<Vec<f64>> {
        let rows = x.nrows();
        let mut out = vec![vec![0.0; h]; rows];
        for i in 0..rows {
            for j in 0..h {
                let mut acc = b[(0, j)];
                for c in 0..h {
                    acc += x[(i, c)] * w[(c, j)];
                }
                out[i][j] = acc;
            }
        }
        out
    };
    let qp = project(q, &p.w_query, &p.b_query);
    let kp = project(k, &p.w_key, &p.b_key);
    let vp = project(v, &p.w_value, &p.b_value);
    let mut merged = vec![vec![0.0; h]; n];
    for head in 0..p.n_heads {
        let off = head * dh;
        for i in 0..n {
            let mut logits = vec![0.0; m];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += qp[i][off + c] * kp[j][off + c];
                }
                *logit = dot / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += exps[j] / sum * vp[j][off + c];
                }
                merged[i][off + c] = acc;
            }
        }
    }
    let mut out = Array2::zeros((n, h));
    for i in 0..n {
        for j in 0..h {
            let mut acc = p.b_output[(0, j)];
            for c in 0..h {
                acc += merged[i][c] * p.w_output[(c, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Brute-force support-weighted F1 straight from the precision/recall
/// definitions.
pub fn weighted_f1_oracle(true_labels: &[usize], pred_labels: &[usize], classes: usize) -> f64 {
    let n = true_labels.len() as f64;
    let mut score = 0.0;
    for c in 0..classes {
        let tp = true_labels
            .iter()
            .zip(pred_labels)
            .filter(|(&t, &p)| t == c && p == c)
            .count() as f64;
        let predicted = pred_labels.iter().filter(|&&p| p == c).count() as f64;
        let actual = true_labels.iter().filter(|&&t| t == c).count() as f64;
        if actual == 0.0 {
            continue;
        }
        let f1 = if predicted == 0.0 || tp == 0.0 {
            0.0
        } else {
            let precision = tp / predicted;
            let recall = tp / actual;
            2.0 * precision * recall / (precision + recall)
        };
        score += f1 * actual / n;
    }
    score
}
