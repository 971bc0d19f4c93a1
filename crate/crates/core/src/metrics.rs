//! Overlap and surface-distance metrics: Dice similarity coefficient, average
//! symmetric surface distance and the 95th-percentile Hausdorff distance.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Spatial;

/// `2|A n B| / (|A| + |B|)`, `None` when both masks are empty.
pub fn dsc(pred: &[u8], reference: &[u8], class: u8) -> Result<Option<f64>> {
    if pred.len() != reference.len() {
        return Err(shape_err!("masks have {} and {} voxels", pred.len(), reference.len()));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        let (ip, ir) = (p == class, r == class);
        a += ip as usize;
        b += ir as usize;
        both += (ip && ir) as usize;
    }
    if a + b == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (a + b) as f64))
}

fn at(shape: Spatial, r: usize, c: usize, z: usize) -> usize {
    (r * shape[1] + c) * shape[2] + z
}

/// Foreground voxels with at least one six-connected background neighbour;
/// positions outside the volume count as background.
pub fn surface_voxels(mask: &[bool], shape: Spatial) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            for z in 0..shape[2] {
                if !mask[at(shape, r, c, z)] {
                    continue;
                }
                let p = [r, c, z];
                let boundary = (0..3).any(|a| {
                    let lo = p[a] == 0 || {
                        let mut q = p;
                        q[a] -= 1;
                        !mask[at(shape, q[0], q[1], q[2])]
                    };
                    let hi = p[a] + 1 == shape[a] || {
                        let mut q = p;
                        q[a] += 1;
                        !mask[at(shape, q[0], q[1], q[2])]
                    };
                    lo || hi
                });
                if boundary {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Squared spacing-scaled distance from every voxel to the nearest seed,
/// accumulated as `(dz^2 + dw^2) + dh^2` through three separable minimum
/// passes. `None` when there are no seeds.
pub fn squared_distance_map(seeds: &[[usize; 3]], shape: Spatial, spacing: [f64; 3]) -> Option<Vec<f64>> {
    if seeds.is_empty() {
        return None;
    }
    let [h, w, d] = shape;
    let n = h * w * d;
    let mut g = vec![f64::INFINITY; n];
    let mut is_seed = vec![false; n];
    for s in seeds {
        is_seed[at(shape, s[0], s[1], s[2])] = true;
    }
    // depth
    for r in 0..h {
        for c in 0..w {
            for z in 0..d {
                let mut best = f64::INFINITY;
                for z2 in 0..d {
                    if is_seed[at(shape, r, c, z2)] {
                        let t = (z as f64 - z2 as f64) * spacing[2];
                        best = best.min(t * t);
                    }
                }
                g[at(shape, r, c, z)] = best;
            }
        }
    }
    // width
    let mut g2 = vec![f64::INFINITY; n];
    let mut line = vec![0.0; w];
    for r in 0..h {
        for z in 0..d {
            for (c, l) in line.iter_mut().enumerate() {
                *l = g[at(shape, r, c, z)];
            }
            for c in 0..w {
                let mut best = f64::INFINITY;
                for (c2, &v) in line.iter().enumerate() {
                    let t = (c as f64 - c2 as f64) * spacing[1];
                    best = best.min(v + t * t);
                }
                g2[at(shape, r, c, z)] = best;
            }
        }
    }
    // height
    let mut line = vec![0.0; h];
    for c in 0..w {
        for z in 0..d {
            for (r, l) in line.iter_mut().enumerate() {
                *l = g2[at(shape, r, c, z)];
            }
            for r in 0..h {
                let mut best = f64::INFINITY;
                for (r2, &v) in line.iter().enumerate() {
                    let t = (r as f64 - r2 as f64) * spacing[0];
                    best = best.min(v + t * t);
                }
                g[at(shape, r, c, z)] = best;
            }
        }
    }
    Some(g)
}

/// Nearest-surface distances from `pred` to `reference` and back, pooled.
/// `None` when either mask is empty.
pub fn surface_distances(pred: &[bool], reference: &[bool], shape: Spatial, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    let n: usize = shape.iter().product();
    if pred.len() != n || reference.len() != n {
        return Err(shape_err!(
            "masks of {} and {} voxels for shape {:?}",
            pred.len(),
            reference.len(),
            shape
        ));
    }
    let sa = surface_voxels(pred, shape);
    let sb = surface_voxels(reference, shape);
    let (Some(da), Some(db)) = (
        squared_distance_map(&sa, shape, spacing),
        squared_distance_map(&sb, shape, spacing),
    ) else {
        return Ok(None);
    };
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    out.extend(sa.iter().map(|p| libm::sqrt(db[at(shape, p[0], p[1], p[2])])));
    out.extend(sb.iter().map(|p| libm::sqrt(da[at(shape, p[0], p[1], p[2])])));
    Ok(Some(out))
}

/// Arithmetic mean; `None` for an empty set.
pub fn assd(distances: &[f64]) -> Option<f64> {
    if distances.is_empty() {
        return None;
    }
    Some(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// 95th percentile, linearly interpolated between order statistics at rank
/// `0.95 * (n - 1)`.
pub fn hd95(distances: &[f64]) -> Option<f64> {
    percentile(distances, 0.95)
}

pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    Some(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Metrics of one foreground class in one case; `None` marks a vacuous or
/// undefined value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub dsc: Option<f64>,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Metrics for classes `1..num_classes` of one case.
pub fn evaluate_case(
    pred: &[u8],
    reference: &[u8],
    shape: Spatial,
    spacing: [f64; 3],
    num_classes: usize,
) -> Result<Vec<ClassMetrics>> {
    (1..num_classes)
        .map(|k| {
            let k = k as u8;
            let d = dsc(pred, reference, k)?;
            let a: Vec<bool> = pred.iter().map(|&v| v == k).collect();
            let b: Vec<bool> = reference.iter().map(|&v| v == k).collect();
            let dist = surface_distances(&a, &b, shape, spacing)?;
            Ok(ClassMetrics {
                dsc: d,
                assd: dist.as_deref().and_then(assd),
                hd95: dist.as_deref().and_then(hd95),
            })
        })
        .collect()
}

/// Mean and sample standard deviation over defined values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    Some(Summary {
        mean,
        sd,
        count: v.len(),
    })
}

/// Per-case metrics plus per-class summaries over the corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub cases: Vec<Vec<ClassMetrics>>,
}

impl MetricsReport {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            cases: Vec::new(),
        }
    }

    pub fn push(&mut self, case: Vec<ClassMetrics>) {
        self.cases.push(case);
    }

    /// Summary of class `k` (1-based foreground class).
    pub fn class_summary(&self, k: usize, f: impl Fn(&ClassMetrics) -> Option<f64>) -> Option<Summary> {
        summarize(self.cases.iter().map(|c| c.get(k - 1).and_then(&f)))
    }

    /// Mean foreground DSC: average over classes of the per-class corpus mean.
    pub fn mean_dsc(&self) -> Option<f64> {
        let per_class: Vec<f64> = (1..self.num_classes)
            .filter_map(|k| self.class_summary(k, |m| m.dsc).map(|s| s.mean))
            .collect();
        if per_class.is_empty() {
            None
        } else {
            Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_hand_values() {
        assert_eq!(dsc(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), Some(1.0));
        assert_eq!(dsc(&[1, 0], &[0, 1], 1).unwrap(), Some(0.0));
        assert_eq!(dsc(&[0, 0], &[0, 0], 1).unwrap(), None);
    }

    #[test]
    fn shifted_cube_dsc() {
        // 2x2x2 cube at (0..2) and shifted by one along depth, inside 4x4x4
        let shape = [4, 4, 4];
        let mut a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        for r in 0..2 {
            for c in 0..2 {
                for z in 0..2 {
                    a[at(shape, r, c, z)] = 1;
                    b[at(shape, r, c, z + 1)] = 1;
                }
            }
        }
        assert_eq!(dsc(&a, &b, 1).unwrap(), Some(0.5));
    }

    #[test]
    fn single_voxels_three_apart() {
        let shape = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[4] = true;
        let d = surface_distances(&a, &b, shape, [1.0; 3]).unwrap().unwrap();
        assert_eq!(d, vec![3.0, 3.0]);
        assert_eq!(assd(&d), Some(3.0));
        assert_eq!(hd95(&d), Some(3.0));
        assert!(surface_distances(&a, &[false; 8], shape, [1.0; 3]).unwrap().is_none());
    }

    #[test]
    fn percentile_hand_values() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(assd(&v), Some(50.5));
        assert!((hd95(&v).unwrap() - 95.05).abs() < 1e-9);
        assert_eq!(hd95(&[7.0]), Some(7.0));
        assert_eq!(hd95(&[]), None);
    }

    #[test]
    fn summary_excludes_missing() {
        let s = summarize([Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - core::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
