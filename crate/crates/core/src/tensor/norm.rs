//! Per-channel batch normalization over the batch and spatial axes.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

fn split(x: &[usize], channels: usize) -> Result<(usize, usize)> {
    if x.len() < 2 || x[1] != channels {
        return Err(shape_err!(
            "batch norm: input {:?} does not have {} channels on axis 1",
            x,
            channels
        ));
    }
    Ok((x[0], x[2..].iter().product()))
}

pub fn batch_stats<T: Real>(x: &Tensor<T>) -> Result<BatchStats> {
    let ch = *x.shape().get(1).ok_or_else(|| shape_err!("batch norm input is 1-d"))?;
    let (n, inner) = split(x.shape(), ch)?;
    let count = n * inner;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * ch + c) * inner;
            s += x.data()[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * ch + c) * inner;
            q += x.data()[base..base + inner]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

fn affine<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<Tensor<T>> {
    let ch = gamma.len();
    if beta.len() != ch || mean.len() != ch {
        return Err(shape_err!("batch norm parameter lengths disagree"));
    }
    let (n, inner) = split(x.shape(), ch)?;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..ch {
            let base = (b * ch + c) * inner;
            let m = T::from_f64(mean[c]);
            let s = T::from_f64(inv_std[c]) * gamma.data()[c];
            let bt = beta.data()[c];
            for (o, &v) in out[base..base + inner].iter_mut().zip(&x.data()[base..base + inner]) {
                *o = (v - m) * s + bt;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Normalizes with mini-batch statistics; returns the output and the statistics.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats)> {
    let stats = batch_stats(x)?;
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    Ok((affine(x, gamma, beta, &stats.mean, &inv)?, stats))
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor<T>> {
    let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    affine(x, gamma, beta, running_mean, &inv)
}

/// Gradients `(dx, dgamma, dbeta)`. `mean`/`var` are the statistics used in the
/// forward pass; `batch_stats` selects whether they depended on `x`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ch = gamma.len();
    let (n, inner) = split(x.shape(), ch)?;
    let m = (n * inner) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let inv = 1.0 / libm::sqrt(var[c] + eps);
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let base = (b * ch + c) * inner;
            for k in base..base + inner {
                let g = grad.data()[k].as_f64();
                let xhat = (x.data()[k].as_f64() - mean[c]) * inv;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dgamma[c] = T::from_f64(sum_gx);
        dbeta[c] = T::from_f64(sum_g);
        let gm = gamma.data()[c].as_f64();
        for b in 0..n {
            let base = (b * ch + c) * inner;
            for k in base..base + inner {
                let g = grad.data()[k].as_f64();
                dx[k] = T::from_f64(if batch_stats {
                    let xhat = (x.data()[k].as_f64() - mean[c]) * inv;
                    gm * inv * (g - sum_g / m - xhat * sum_gx / m)
                } else {
                    gm * inv * g
                });
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[ch], dgamma)?,
        Tensor::new(&[ch], dbeta)?,
    ))
}
