//! Segmentation losses over softmax probabilities `[N, K, H, W, D]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Probability floor inside the cross-entropy logarithm.
pub const CE_FLOOR: f64 = 1e-7;

/// Integer labels for a batch, laid out `[N, H, W, D]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    classes: usize,
    dims: [usize; 4],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(classes: usize, dims: [usize; 4], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() || labels.is_empty() {
            return Err(shape_err!(
                "label dims {:?} do not match {} voxels",
                dims,
                labels.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid!("label {} outside [0, {})", l, classes));
        }
        Ok(Self {
            classes,
            dims,
            labels,
        })
    }

    /// Stacks single volumes `[H, W, D]` into a batch.
    pub fn batch(classes: usize, spatial: [usize; 3], volumes: &[&[u8]]) -> Result<Self> {
        let mut labels = Vec::with_capacity(volumes.len() * spatial.iter().product::<usize>());
        for v in volumes {
            labels.extend_from_slice(v);
        }
        Self::new(classes, [volumes.len(), spatial[0], spatial[1], spatial[2]], labels)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn check<T: Real>(&self, probs: &Tensor<T>) -> Result<usize> {
        let [n, k, h, w, d] = probs.dims5()?;
        if k != self.classes || [n, h, w, d] != self.dims {
            return Err(shape_err!(
                "probabilities {:?} do not match labels {:?} with {} classes",
                probs.shape(),
                self.dims,
                self.classes
            ));
        }
        Ok(h * w * d)
    }
}

/// Per-class sums `(I_k, Q_k, Y_k) = (sum y p, sum p^2, sum y)`.
fn dice_sums<T: Real>(probs: &Tensor<T>, labels: &LabelVolume) -> Result<Vec<[f64; 3]>> {
    let vol = labels.check(probs)?;
    let k = labels.classes;
    let mut sums = vec![[0.0; 3]; k];
    let p = probs.data();
    for (b, chunk) in labels.labels.chunks(vol).enumerate() {
        for (c, s) in sums.iter_mut().enumerate() {
            let base = (b * k + c) * vol;
            for (i, &l) in chunk.iter().enumerate() {
                let pv = p[base + i].as_f64();
                s[1] += pv * pv;
                if l as usize == c {
                    s[0] += pv;
                    s[2] += 1.0;
                }
            }
        }
    }
    Ok(sums)
}

/// `1 - (1/K) sum_k (2 I_k + eps) / (Y_k + Q_k + eps)`, accumulated over the
/// whole batch per class.
pub fn soft_dice_forward<T: Real>(probs: &Tensor<T>, labels: &LabelVolume, eps: f64) -> Result<f64> {
    let sums = dice_sums(probs, labels)?;
    let k = sums.len() as f64;
    let mean: f64 = sums
        .iter()
        .map(|[i, q, y]| (2.0 * i + eps) / (y + q + eps))
        .sum::<f64>()
        / k;
    Ok(1.0 - mean)
}

pub fn soft_dice_backward<T: Real>(probs: &Tensor<T>, labels: &LabelVolume, eps: f64) -> Result<Tensor<T>> {
    let sums = dice_sums(probs, labels)?;
    let vol = labels.check(probs)?;
    let k = labels.classes;
    let kf = k as f64;
    let mut out = Tensor::zeros_like(probs);
    let p = probs.data();
    let g = out.data_mut();
    for (b, chunk) in labels.labels.chunks(vol).enumerate() {
        for (c, &[i_k, q_k, y_k]) in sums.iter().enumerate() {
            let den = y_k + q_k + eps;
            let num = 2.0 * i_k + eps;
            let base = (b * k + c) * vol;
            for (i, &l) in chunk.iter().enumerate() {
                let y = if l as usize == c { 1.0 } else { 0.0 };
                let pv = p[base + i].as_f64();
                let d = (2.0 * y * den - num * 2.0 * pv) / (den * den);
                g[base + i] = T::from_f64(-d / kf);
            }
        }
    }
    Ok(out)
}

/// Mean negative log-probability of the true class over all voxels.
pub fn cross_entropy_forward<T: Real>(probs: &Tensor<T>, labels: &LabelVolume) -> Result<f64> {
    let vol = labels.check(probs)?;
    let k = labels.classes;
    let p = probs.data();
    let mut acc = 0.0;
    for (b, chunk) in labels.labels.chunks(vol).enumerate() {
        for (i, &l) in chunk.iter().enumerate() {
            let pv = p[(b * k + l as usize) * vol + i].as_f64().max(CE_FLOOR);
            acc -= libm::log(pv);
        }
    }
    Ok(acc / labels.labels.len() as f64)
}

pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &LabelVolume) -> Result<Tensor<T>> {
    let vol = labels.check(probs)?;
    let k = labels.classes;
    let n = labels.labels.len() as f64;
    let mut out = Tensor::zeros_like(probs);
    let p = probs.data();
    let g = out.data_mut();
    for (b, chunk) in labels.labels.chunks(vol).enumerate() {
        for (i, &l) in chunk.iter().enumerate() {
            let idx = (b * k + l as usize) * vol + i;
            let pv = p[idx].as_f64();
            if pv > CE_FLOOR {
                g[idx] = T::from_f64(-1.0 / (pv * n));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &LabelVolume) -> Tensor<f64> {
        let [n, h, w, d] = labels.dims();
        let k = labels.classes();
        let vol = h * w * d;
        Tensor::from_fn(&[n, k, h, w, d], |idx| {
            let b = idx / (k * vol);
            let c = (idx / vol) % k;
            let i = idx % vol;
            if labels.labels()[b * vol + i] as usize == c {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_dice_loss() {
        let labels = LabelVolume::new(3, [1, 2, 2, 2], vec![0, 1, 2, 1, 0, 0, 2, 1]).unwrap();
        let p = one_hot(&labels);
        let l = soft_dice_forward(&p, &labels, DICE_EPS).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(cross_entropy_forward(&p, &labels).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_hand_value() {
        // two voxels, two classes, one of each, p = 0.5 everywhere:
        // per class (2 * 0.5 + eps) / (1 + 0.5 + eps)
        let labels = LabelVolume::new(2, [1, 2, 1, 1], vec![0, 1]).unwrap();
        let p = Tensor::full(&[1, 2, 2, 1, 1], 0.5f64).unwrap();
        let l = soft_dice_forward(&p, &labels, DICE_EPS).unwrap();
        let expect = 1.0 - (1.0 + DICE_EPS) / (1.5 + DICE_EPS);
        assert!((l - expect).abs() < 1e-12);
        let ce = cross_entropy_forward(&p, &labels).unwrap();
        assert!((ce - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shapes_are_checked() {
        let labels = LabelVolume::new(2, [1, 2, 1, 1], vec![0, 1]).unwrap();
        let p = Tensor::full(&[1, 3, 2, 1, 1], 0.5f64).unwrap();
        assert!(soft_dice_forward(&p, &labels, DICE_EPS).is_err());
        assert!(LabelVolume::new(2, [1, 2, 1, 1], vec![0, 2]).is_err());
    }
}
