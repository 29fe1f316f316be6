//! Training losses and their analytic gradients with respect to predictions.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Predictions are clamped into `[PRED_CLAMP, 1 - PRED_CLAMP]` before logs.
pub const PRED_CLAMP: f64 = 1e-12;

fn check_pair(op: &'static str, pred: &DenseMatrix, labels: &DenseMatrix) -> Result<()> {
    if pred.shape() != labels.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", pred.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::config(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Mean binary cross-entropy `-(1/n) Σ [y ln ŷ + (1-y) ln(1-ŷ)]`.
pub fn cross_entropy_loss(pred: &DenseMatrix, labels: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    check_pair("cross_entropy_loss", pred, labels)?;
    if let Some(bad) = labels.as_slice().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::config(format!("binary labels must be 0 or 1, found {bad}")));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.as_slice().iter().zip(labels.as_slice()) {
        let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(-(y / p - (1.0 - y) / (1.0 - p)) / n);
    }
    let grad = DenseMatrix::from_vec(pred.rows(), pred.cols(), grad)?;
    Ok((total / n, grad))
}

/// Mean squared error `(1/n) Σ (ŷ - y)²`.
pub fn mse_loss(pred: &DenseMatrix, labels: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    check_pair("mse_loss", pred, labels)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.as_slice().iter().zip(labels.as_slice()) {
        let d = p - y;
        total += d * d;
        grad.push(2.0 * d / n);
    }
    let grad = DenseMatrix::from_vec(pred.rows(), pred.cols(), grad)?;
    Ok((total / n, grad))
}
