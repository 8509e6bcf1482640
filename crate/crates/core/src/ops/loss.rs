use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax cross-entropy with label smoothing, averaged over rows.
/// Returns the loss and the row-wise probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    let (rows, classes) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::dim(format!("cross_entropy: {rows} rows but {} labels", labels.len())));
    }
    if rows == 0 {
        return Err(Error::dim("cross_entropy on an empty batch"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let probs = crate::ops::softmax_axis(logits, 1)?;
    let off = smoothing / classes as f64;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &probs.data()[r * classes..(r + 1) * classes];
        for (k, p) in row.iter().enumerate() {
            let q = off + if k == label { 1.0 - smoothing } else { 0.0 };
            if q > 0.0 {
                total -= q * p.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    let loss = total / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy".into() });
    }
    Ok((loss, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], smoothing: f64, dloss: f64) -> Result<Tensor> {
    let (rows, classes) = probs.dims2()?;
    let off = smoothing / classes as f64;
    let scale = dloss / rows as f64;
    let mut d = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        for k in 0..classes {
            let q = off + if k == label { 1.0 - smoothing } else { 0.0 };
            d[r * classes + k] = (d[r * classes + k] - q) * scale;
        }
    }
    Tensor::from_vec(probs.shape(), d)
}
