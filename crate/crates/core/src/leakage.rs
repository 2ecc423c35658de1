//! Label leakage from last-layer gradients.
//!
//! For a classifier trained with cross-entropy over a one-hot label `c`, the
//! loss gradient with respect to logit `i` is `softmax(y)_i - [i == c]`: the
//! true class gets the only negative entry, in `(-1, 0)`, and every other
//! class lands in `(0, 1)`. The weight-gradient row of the output layer for
//! class `i` is that scalar times the (class independent) penultimate
//! activation vector, so rows inherit the sign pattern and the true class is
//! the one row whose inner product with every other row is non-positive.

use crate::error::{Error, Result};
use crate::tensor::{dot, shifted_exps, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPrediction {
    pub label: usize,
    /// True when exactly one row satisfied the non-positive inner-product
    /// rule; false when the decision came from the fallback ordering.
    pub exact: bool,
    /// Largest inner product between the chosen row and any other row.
    pub witness: f64,
}

/// Gradient of `-log softmax(logits)_c` with respect to the logits.
///
/// The true-class entry is formed from the sum of the other exponentials
/// instead of `softmax_c - 1`, which keeps it strictly inside `(-1, 0)` even
/// when `softmax_c` rounds to one.
pub fn softmax_grad(logits: &Tensor, c: usize) -> Result<Tensor> {
    let n = logits.len();
    if c >= n {
        return Err(Error::Index { index: c, len: n });
    }
    let (exps, total) = shifted_exps(logits.data());
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != c)
        .map(|(_, e)| e)
        .sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / total).collect();
    g[c] = -rest / total;
    Tensor::new(logits.shape(), g)
}

fn rows_of(fc_w_grad: &Tensor) -> Result<(usize, usize)> {
    match fc_w_grad.shape() {
        &[rows, cols] if rows >= 2 => Ok((rows, cols)),
        other => Err(Error::dim(format!(
            "label extraction needs a matrix with at least 2 rows, got {other:?}"
        ))),
    }
}

/// Recovers the ground-truth label from the output-layer weight gradient.
///
/// Returns the unique row whose inner product with every other row is
/// `<= 0`. When no row or several rows qualify, falls back to the row that
/// minimises its largest cross inner product, breaking exact ties by the
/// smaller row sum and then by the lower index; `exact` is false then.
pub fn extract_label(fc_w_grad: &Tensor) -> Result<LabelPrediction> {
    let (rows, _) = rows_of(fc_w_grad)?;
    if fc_w_grad.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateGradient(
            "output-layer weight gradient is identically zero".into(),
        ));
    }
    let row = |i: usize| fc_w_grad.row(i);

    // Rows other than the true class fail on the first positive product, so
    // this scan costs about two inner products per row.
    let mut qualifying = Vec::new();
    for i in 0..rows {
        let mut max_dot = f64::NEG_INFINITY;
        let mut ok = true;
        for j in (0..rows).filter(|&j| j != i) {
            let d = dot(row(i), row(j));
            if d > 0.0 {
                ok = false;
                break;
            }
            max_dot = max_dot.max(d);
        }
        if ok {
            qualifying.push((i, max_dot));
        }
    }
    if let [(label, witness)] = qualifying[..] {
        return Ok(LabelPrediction {
            label,
            exact: true,
            witness,
        });
    }

    let mut best: Option<(usize, f64, f64)> = None;
    for i in 0..rows {
        let max_dot = (0..rows)
            .filter(|&j| j != i)
            .map(|j| dot(row(i), row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row(i).iter().sum();
        let better = match best {
            None => true,
            Some((_, bm, bs)) => max_dot < bm || (max_dot == bm && sum < bs),
        };
        if better {
            best = Some((i, max_dot, sum));
        }
    }
    let (label, witness, _) = best.expect("at least two rows");
    Ok(LabelPrediction {
        label,
        exact: false,
        witness,
    })
}

/// Shortcut valid when the penultimate activations are non-negative: the
/// true class owns the only all-negative weight-gradient row, and the only
/// negative bias-gradient entry.
///
/// The weight rows decide when exactly one of them is all-negative; the bias
/// gradient decides otherwise. Conflicting answers are reported as
/// degenerate.
pub fn extract_label_sign_rule(fc_w_grad: &Tensor, fc_b_grad: &Tensor) -> Result<LabelPrediction> {
    let (rows, _) = rows_of(fc_w_grad)?;
    if fc_b_grad.len() != rows {
        return Err(Error::dim(format!(
            "bias gradient {:?} does not match weight gradient {:?}",
            fc_b_grad.shape(),
            fc_w_grad.shape()
        )));
    }
    let negative_rows: Vec<usize> = (0..rows)
        .filter(|&i| fc_w_grad.row(i).iter().all(|&v| v < 0.0))
        .collect();
    let negative_bias: Vec<usize> = (0..rows).filter(|&i| fc_b_grad.data()[i] < 0.0).collect();

    let label = match (&negative_rows[..], &negative_bias[..]) {
        (&[r], &[b]) if r != b => {
            return Err(Error::DegenerateGradient(format!(
                "weight rows point at class {r}, bias gradient at class {b}"
            )))
        }
        (&[r], _) => r,
        (_, &[b]) => b,
        _ => {
            return Err(Error::DegenerateGradient(format!(
                "{} all-negative rows and {} negative bias entries",
                negative_rows.len(),
                negative_bias.len()
            )))
        }
    };
    let witness = fc_w_grad
        .row(label)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LabelPrediction {
        label,
        exact: true,
        witness,
    })
}
