//! Orthogonal regularization over convolution kernel matrices and the
//! combined training loss.
//!
//! A kernel of shape (C_out, C_in, kT, kH, kW) is flattened row-major to a
//! matrix W with one row per output channel. The penalty measures the
//! element-wise absolute deviation of the Gram matrix from identity:
//!
//! ```text
//! R(W) = sum_ij |(W Wᵀ - I)_ij|
//! ```
//!
//! which is zero exactly when the rows of W are orthonormal. The training
//! loss adds `lambda * sum R` to the mean cross entropy. `gram_residual_grad`
//! exposes the gradient of the smooth squared-residual form
//! `||W Wᵀ - I||²_F`; descending it is the classical orthogonalization flow
//! and drives R itself to zero, which the kinked subgradient of R cannot do
//! at a fixed step size.

use ndarray::{Array2, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A convolution kernel flattened to (out_channels, fan_in), tagged with the
/// parameter path it came from.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub matrix: Array2<f64>,
    pub origin: String,
}

/// Reshape a convolution kernel block to its penalty matrix. Row-major over
/// the non-leading axes, so fan_in = in_channels * kernel volume.
pub fn kernel_matrix(kernel: &ArrayViewD<f64>, origin: &str) -> Result<KernelMatrix> {
    if kernel.ndim() < 2 {
        return Err(Error::Invalid(format!(
            "{origin}: not a convolution kernel (rank {} < 2)",
            kernel.ndim()
        )));
    }
    let out = kernel.shape()[0];
    let fan_in = kernel.len() / out;
    let matrix = kernel
        .to_owned()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((out, fan_in))
        .unwrap();
    Ok(KernelMatrix {
        matrix,
        origin: origin.to_string(),
    })
}

/// Which entries of the Gram deviation are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// sum |W Wᵀ - I| over every entry.
    #[default]
    Full,
    /// Off-diagonal entries only: sum_{i != j} |(W Wᵀ)_ij|.
    OffDiagonal,
}

fn gram_deviation(w: &Array2<f64>) -> Array2<f64> {
    let mut g = w.dot(&w.t());
    for i in 0..g.nrows() {
        g[[i, i]] -= 1.0;
    }
    g
}

pub fn ortho_penalty_with(kernel: &KernelMatrix, form: PenaltyForm) -> f64 {
    let dev = gram_deviation(&kernel.matrix);
    match form {
        PenaltyForm::Full => dev.iter().map(|v| v.abs()).sum(),
        PenaltyForm::OffDiagonal => {
            let mut total = 0.0;
            for ((i, j), v) in dev.indexed_iter() {
                if i != j {
                    // Off-diagonal identity entries are zero, so the
                    // deviation equals the raw Gram entry.
                    total += v.abs();
                }
            }
            total
        }
    }
}

pub fn ortho_penalty(kernel: &KernelMatrix) -> f64 {
    ortho_penalty_with(kernel, PenaltyForm::Full)
}

/// Subgradient of the penalty with respect to W: (S + Sᵀ) W with
/// S = sign(W Wᵀ - I), masked to the active entries of `form`.
pub fn ortho_penalty_grad(kernel: &KernelMatrix, form: PenaltyForm) -> Array2<f64> {
    let dev = gram_deviation(&kernel.matrix);
    let mut s = dev.mapv(f64::signum);
    // signum(0) is 0 already for subgradient purposes, but make it explicit
    // for -0.0 inputs.
    s.mapv_inplace(|v| if v == 0.0 { 0.0 } else { v });
    if form == PenaltyForm::OffDiagonal {
        for i in 0..s.nrows() {
            s[[i, i]] = 0.0;
        }
    }
    let sym = &s + &s.t();
    sym.dot(&kernel.matrix)
}

/// Gradient of the smooth squared Gram residual ||W Wᵀ - I||²_F, namely
/// 4 (W Wᵀ - I) W. Fixed-step descent along it converges to an orthonormal
/// W and therefore to R(W) = 0.
pub fn gram_residual_grad(kernel: &KernelMatrix) -> Array2<f64> {
    let dev = gram_deviation(&kernel.matrix);
    dev.dot(&kernel.matrix) * 4.0
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross entropy over the batch plus its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Invalid("cross entropy over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("labels must be binary, got {bad}")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.index_axis(Axis(0), i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label as usize];
    }
    loss /= n as f64;
    let mut dlogits = probs;
    for (i, &label) in labels.iter().enumerate() {
        dlogits[[i, label as usize]] -= 1.0;
    }
    dlogits /= n as f64;
    Ok((loss, dlogits))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub penalty: f64,
}

/// Combined objective: mean cross entropy plus `lambda` times the penalty
/// summed (not averaged) over the kernel set.
pub fn total_loss(
    logits: &Array2<f64>,
    labels: &[u8],
    kernels: &[KernelMatrix],
    lambda: f64,
    form: PenaltyForm,
) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let (ce, _) = cross_entropy(logits, labels)?;
    let penalty: f64 = kernels.iter().map(|k| ortho_penalty_with(k, form)).sum();
    Ok(LossBreakdown {
        total: ce + lambda * penalty,
        ce,
        penalty,
    })
}
