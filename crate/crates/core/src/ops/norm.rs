use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GRN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Everything the backward pass and the running-stat update need.
#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean (train mode only).
    pub batch_mean: Option<Vec<f64>>,
    /// Per-channel unbiased batch variance (train mode only).
    pub batch_var: Option<Vec<f64>>,
}

fn check_channel_vec(t: &Tensor, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::dim(format!("batch_norm2d: {what} has shape {:?}, expected [{c}]", t.shape())));
    }
    Ok(())
}

/// Batch normalization over `(N, H, W)` per channel.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: NormMode,
    eps: f64,
) -> Result<BatchNormOutput> {
    let (n, c, h, w) = x.dims4()?;
    for (t, what) in [(gamma, "gamma"), (beta, "beta"), (running_mean, "running mean"), (running_var, "running var")] {
        check_channel_vec(t, c, what)?;
    }
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let (mean, var, batch_var) = match mode {
        NormMode::Train => {
            if count == 0 {
                return Err(Error::dim("batch_norm2d: empty batch in train mode"));
            }
            let stats = parallel::map_indices(c, |ci| {
                let mut sum = 0.0;
                for ni in 0..n {
                    sum += xd[(ni * c + ci) * plane..][..plane].iter().sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for ni in 0..n {
                    sq += xd[(ni * c + ci) * plane..][..plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                (mean, sq / count as f64)
            });
            let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let var: Vec<f64> = stats.iter().map(|s| s.1).collect();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let batch_var = var.iter().map(|v| v * unbias).collect();
            (mean, var, Some(batch_var))
        }
        NormMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in off..off + plane {
                let xh = (xd[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let is_train = mode == NormMode::Train;
    Ok(BatchNormOutput {
        y: Tensor::from_vec(x.shape(), y)?.ensure_finite("batch_norm2d")?,
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std,
        batch_mean: is_train.then_some(mean),
        batch_var,
    })
}

/// Gradients `(dx, dgamma, dbeta)`; `train` selects whether batch statistics
/// depend on `x`.
pub fn batch_norm2d_backward(
    saved: &BatchNormOutput,
    gamma: &Tensor,
    dy: &Tensor,
    mode: NormMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let xh = saved.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                dgamma[ci] += g[i] * xh[i];
                dbeta[ci] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let scale = gamma.data()[ci] * saved.inv_std[ci];
            for i in off..off + plane {
                dx[i] = match mode {
                    NormMode::Train => scale * (g[i] - dbeta[ci] / count - xh[i] * dgamma[ci] / count),
                    NormMode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok((Tensor::from_vec(dy.shape(), dx)?, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

/// Exponential moving average update of running statistics.
pub fn update_running(running: &Tensor, batch: &[f64], momentum: f64) -> Tensor {
    let data = running.data().iter().zip(batch).map(|(r, b)| (1.0 - momentum) * r + momentum * b).collect();
    Tensor::from_vec(running.shape(), data).expect("running stat shape")
}

#[derive(Debug, Clone)]
pub struct GrnOutput {
    pub y: Tensor,
    /// Spatial L2 norm per `(n, c)`.
    pub norms: Vec<f64>,
    /// Per-`n` mean of the norms plus epsilon.
    pub denom: Vec<f64>,
}

/// Global response normalization: `gamma * (x * N) + beta + x` with
/// `N_c = G_c / (mean_c G_c + eps)` and `G_c` the spatial L2 norm.
pub fn grn(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<GrnOutput> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!("grn: gamma/beta must have shape [{c}]")));
    }
    let plane = h * w;
    let xd = x.data();
    let norms: Vec<f64> =
        (0..n * c).map(|i| xd[i * plane..(i + 1) * plane].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let denom: Vec<f64> = (0..n).map(|ni| norms[ni * c..(ni + 1) * c].iter().sum::<f64>() / c as f64 + eps).collect();
    let mut y = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let nx = norms[ni * c + ci] / denom[ni];
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let off = (ni * c + ci) * plane;
            for i in off..off + plane {
                y[i] = g * xd[i] * nx + b + xd[i];
            }
        }
    }
    Ok(GrnOutput { y: Tensor::from_vec(x.shape(), y)?.ensure_finite("grn")?, norms, denom })
}

pub fn grn_backward(x: &Tensor, gamma: &Tensor, saved: &GrnOutput, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let xd = x.data();
    let g = dy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; x.numel()];
    for ni in 0..n {
        let d = saved.denom[ni];
        let norms = &saved.norms[ni * c..(ni + 1) * c];
        // Upstream gradient with respect to N_c.
        let mut dnx = vec![0.0; c];
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let nx = norms[ci] / d;
            let mut s = 0.0;
            for i in off..off + plane {
                s += g[i] * xd[i];
                dbeta[ci] += g[i];
            }
            dgamma[ci] += s * nx;
            dnx[ci] = gamma.data()[ci] * s;
        }
        let coupled: f64 = dnx.iter().zip(norms).map(|(a, b)| a * b).sum::<f64>() / (c as f64 * d * d);
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let nx = norms[ci] / d;
            let dnorm = dnx[ci] / d - coupled;
            let via_norm = if norms[ci] > 0.0 { dnorm / norms[ci] } else { 0.0 };
            let direct = 1.0 + gamma.data()[ci] * nx;
            for i in off..off + plane {
                dx[i] = g[i] * direct + via_norm * xd[i];
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), dx)?, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bn_train(x: &Tensor, gamma: f64, beta: f64) -> BatchNormOutput {
        let c = x.shape()[1];
        batch_norm2d(
            x,
            &Tensor::full(&[c], gamma),
            &Tensor::full(&[c], beta),
            &Tensor::zeros(&[c]),
            &Tensor::ones(&[c]),
            NormMode::Train,
            BN_EPS,
        )
        .unwrap()
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let mut data = vec![0.0; 2 * 3 * 4];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i / 4) % 3) as f64 * 7.0 - 2.0;
        }
        let x = Tensor::from_vec(&[2, 3, 2, 2], data).unwrap();
        assert!(bn_train(&x, 1.0, 0.0).y.max_abs() <= 1e-3);
    }

    #[test]
    fn train_mode_output_has_unit_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[4, 2, 5, 5], (0..200).map(|_| rng.gen_range(-3.0..5.0)).collect()).unwrap();
        let y = bn_train(&x, 1.0, 0.0).y;
        for ci in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|ni| y.data()[(ni * 2 + ci) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn zero_gamma_returns_beta() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, -2.0, 0.5]).unwrap();
        assert!(bn_train(&x, 0.0, 5.0).y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let out = batch_norm2d(
            &x,
            &Tensor::ones(&[1]),
            &Tensor::zeros(&[1]),
            &Tensor::full(&[1], 1.0),
            &Tensor::full(&[1], 4.0 - BN_EPS),
            NormMode::Eval,
            BN_EPS,
        )
        .unwrap();
        assert!((out.y.data()[0] - 1.0).abs() < 1e-12);
        assert!((out.y.data()[1] - 2.0).abs() < 1e-12);
        assert!(out.batch_mean.is_none());
    }

    #[test]
    fn grn_single_channel_has_unit_response() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let out = grn(&x, &Tensor::full(&[1], 0.7), &Tensor::full(&[1], 0.2), 0.0).unwrap();
        for (y, x) in out.y.data().iter().zip(x.data()) {
            assert!((y - (0.7 * x + 0.2 + x)).abs() < 1e-12);
        }
    }

    #[test]
    fn grn_is_positively_homogeneous_without_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(&[2, 3, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![0.3, -0.5, 1.2]).unwrap();
        let beta = Tensor::zeros(&[3]);
        let c = 3.7;
        let lhs = grn(&x.scale(c), &gamma, &beta, GRN_EPS).unwrap().y;
        let rhs = grn(&x, &gamma, &beta, GRN_EPS).unwrap().y.scale(c);
        assert!(lhs.max_rel_diff(&rhs) < 1e-6);
        let exact_l = grn(&x.scale(c), &gamma, &beta, 0.0).unwrap().y;
        let exact_r = grn(&x, &gamma, &beta, 0.0).unwrap().y.scale(c);
        assert!(exact_l.max_rel_diff(&exact_r) < 1e-12);
    }
}
