//! Synthetic low-contrast multi-structure volumes, intensity preprocessing
//! and random flip/rotation augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Spatial;

pub const BACKGROUND_INTENSITY: f64 = -50.0;
pub const CLIP_LO: f64 = -250.0;
pub const CLIP_HI: f64 = 200.0;
/// Attempts per structure before placement gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub shape: Spatial,
    /// Foreground structures, `K - 1`.
    pub num_structures: usize,
    /// Mean intensity step between consecutive structures.
    pub contrast_delta: f64,
    pub noise_sigma: f64,
    /// Every structure after the first must share a face with an earlier one.
    pub adjacency: bool,
    /// In-plane semi-axis range in voxels.
    pub radius_hw: (f64, f64),
    /// Semi-axis range along depth in voxels.
    pub radius_d: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [32, 32, 16],
            num_structures: 3,
            contrast_delta: 20.0,
            noise_sigma: 20.0,
            adjacency: true,
            radius_hw: (4.0, 8.0),
            radius_d: (3.0, 5.0),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(invalid!("volume shape must be positive, got {:?}", self.shape));
        }
        if self.num_structures == 0 || self.num_structures > 254 {
            return Err(invalid!("num_structures must lie in [1, 254]"));
        }
        if !(self.noise_sigma >= 0.0) || !self.contrast_delta.is_finite() {
            return Err(invalid!("noise sigma must be >= 0 and contrast finite"));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !ok(self.radius_hw) || !ok(self.radius_d) {
            return Err(invalid!("radius ranges must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_structures + 1
    }
}

/// One volume with its labels and, optionally, reference edges. All arrays
/// are row-major `H x W x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub shape: Spatial,
    pub spacing: [f32; 3],
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub edges: Option<Vec<u8>>,
}

impl VolumeSample {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid { center: [f64; 3], rot: [[f64; 3]; 3], radii: [f64; 3] },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { center, rot, radii } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let mut acc = 0.0;
                for i in 0..3 {
                    let q = rot[i][0] * d[0] + rot[i][1] * d[1] + rot[i][2] * d[2];
                    acc += (q / radii[i]) * (q / radii[i]);
                }
                acc <= 1.0
            }
            Shape::Capsule { a, b, radius } => {
                let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
                q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= radius * radius
            }
        }
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    let mut n = 0.0;
    while n < 1e-12 {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        n = libm::sqrt(q.iter().map(|v| v * v).sum());
    }
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> (Shape, [f64; 3], [f64; 3]) {
    let [h, w, d] = spec.shape.map(|v| v as f64);
    let rh = rng.random_range(spec.radius_hw.0..=spec.radius_hw.1);
    let rw = rng.random_range(spec.radius_hw.0..=spec.radius_hw.1);
    let rd = rng.random_range(spec.radius_d.0..=spec.radius_d.1);
    let center = [
        rng.random_range(0.0..h - 1.0),
        rng.random_range(0.0..w - 1.0),
        rng.random_range(0.0..d - 1.0),
    ];
    if rng.random_bool(0.5) {
        let rot = random_rotation(rng);
        let radii = [rh, rw, rd];
        // axis-aligned half extent of the rotated ellipsoid
        let ext = core::array::from_fn(|i| {
            libm::sqrt((0..3).map(|j| { let t = rot[j][i] * radii[j]; t * t }).sum::<f64>())
        });
        (Shape::Ellipsoid { center, rot, radii }, center, ext)
    } else {
        let radius = rd.min(rh);
        let half = rh.max(rw) - radius;
        let angle = rng.random_range(0.0..core::f64::consts::PI);
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let a = [center[0] - half * c, center[1] - half * s, center[2]];
        let b = [center[0] + half * c, center[1] + half * s, center[2]];
        let ext = [half * c.abs() + radius, half * s.abs() + radius, radius];
        (Shape::Capsule { a, b, radius }, center, ext)
    }
}

fn idx(shape: Spatial, r: usize, c: usize, z: usize) -> usize {
    (r * shape[1] + c) * shape[2] + z
}

/// Generates `count` samples. Sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    (0..count).map(|i| gen_one(spec, i as u64)).collect()
}

pub fn gen_one(spec: &SyntheticSpec, index: u64) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let shape = spec.shape;
    let n = shape.iter().product::<usize>();
    let mut labels = vec![0u8; n];
    for k in 1..=spec.num_structures {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (sh, center, ext) = random_shape(&mut rng, spec);
            let fits = (0..3).all(|a| center[a] - ext[a] >= 0.0 && center[a] + ext[a] <= (shape[a] - 1) as f64);
            if !fits {
                continue;
            }
            let mut voxels = Vec::new();
            let mut overlap = 0usize;
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    for z in 0..shape[2] {
                        if sh.contains([r as f64, c as f64, z as f64]) {
                            let i = idx(shape, r, c, z);
                            if labels[i] != 0 {
                                overlap += 1;
                            } else {
                                voxels.push((r, c, z));
                            }
                        }
                    }
                }
            }
            // keep structures substantial and mostly disjoint
            if voxels.len() < 20 || overlap * 4 > voxels.len() {
                continue;
            }
            if spec.adjacency && k > 1 {
                let touches = voxels.iter().any(|&(r, c, z)| {
                    neighbours6(shape, r, c, z).any(|j| labels[j] != 0)
                });
                if !touches {
                    continue;
                }
            }
            for &(r, c, z) in &voxels {
                labels[idx(shape, r, c, z)] = k as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "structure {} of sample {} could not be placed in {:?} after {} attempts",
                k, index, shape, MAX_PLACEMENT_ATTEMPTS
            )));
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| invalid!("noise distribution: {}", e))?;
    let image = labels
        .iter()
        .map(|&l| {
            let mean = BACKGROUND_INTENSITY + l as f64 * spec.contrast_delta;
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (mean + eps) as f32
        })
        .collect();
    Ok(VolumeSample {
        shape,
        spacing: [1.0; 3],
        image,
        labels,
        edges: None,
    })
}

fn neighbours6(shape: Spatial, r: usize, c: usize, z: usize) -> impl Iterator<Item = usize> {
    const OFFS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    OFFS.into_iter().filter_map(move |o| {
        let p = [r as isize + o[0], c as isize + o[1], z as isize + o[2]];
        if (0..3).all(|a| p[a] >= 0 && p[a] < shape[a] as isize) {
            Some(idx(shape, p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    })
}

/// True when some voxel of `a` is six-adjacent to a voxel of `b`.
pub fn structures_touch(labels: &[u8], shape: Spatial, a: u8, b: u8) -> bool {
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            for z in 0..shape[2] {
                if labels[idx(shape, r, c, z)] == a && neighbours6(shape, r, c, z).any(|j| labels[j] == b) {
                    return true;
                }
            }
        }
    }
    false
}

/// Clips to `[lo, hi]` and standardizes to zero mean and unit variance with
/// a variance floor of `1e-8`.
pub fn preprocess(image: &[f32], lo: f64, hi: f64) -> Vec<f32> {
    if image.is_empty() {
        return Vec::new();
    }
    let clipped: Vec<f64> = image.iter().map(|&v| (v as f64).clamp(lo, hi)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var.max(1e-8));
    clipped.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

/// One augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flips: [bool; 3],
    /// Rotation about the depth axis, degrees.
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flips: [false; 3],
        angle_deg: 0.0,
    };

    pub fn draw(rng: &mut impl Rng, max_angle_deg: f64) -> Self {
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let angle_deg = if max_angle_deg > 0.0 {
            rng.random_range(-max_angle_deg..=max_angle_deg)
        } else {
            0.0
        };
        Self { flips, angle_deg }
    }
}

pub fn augment(sample: &VolumeSample, rng: &mut impl Rng, max_angle_deg: f64) -> Result<VolumeSample> {
    apply_augment(sample, &AugmentParams::draw(rng, max_angle_deg))
}

/// Flips, then rotates in-plane about the volume centre. Intensities use
/// bilinear interpolation, labels and edges nearest neighbour; sample
/// coordinates are clamped to the volume.
pub fn apply_augment(sample: &VolumeSample, p: &AugmentParams) -> Result<VolumeSample> {
    let n = sample.voxels();
    if sample.image.len() != n || sample.labels.len() != n || sample.edges.as_ref().is_some_and(|e| e.len() != n) {
        return Err(shape_err!("sample arrays do not match shape {:?}", sample.shape));
    }
    let mut out = sample.clone();
    for axis in 0..3 {
        if p.flips[axis] {
            flip(&mut out.image, sample.shape, axis);
            flip(&mut out.labels, sample.shape, axis);
            if let Some(e) = out.edges.as_mut() {
                flip(e, sample.shape, axis);
            }
        }
    }
    if p.angle_deg != 0.0 {
        out.image = rotate_depth_axis_linear(&out.image, sample.shape, p.angle_deg);
        out.labels = rotate_depth_axis_nearest(&out.labels, sample.shape, p.angle_deg);
        if let Some(e) = out.edges.as_ref() {
            out.edges = Some(rotate_depth_axis_nearest(e, sample.shape, p.angle_deg));
        }
    }
    Ok(out)
}

pub fn flip<V: Copy>(data: &mut [V], shape: Spatial, axis: usize) {
    let [h, w, d] = shape;
    let src = data.to_vec();
    for r in 0..h {
        for c in 0..w {
            for z in 0..d {
                let mut q = [r, c, z];
                q[axis] = shape[axis] - 1 - q[axis];
                data[idx(shape, r, c, z)] = src[idx(shape, q[0], q[1], q[2])];
            }
        }
    }
}

/// Source coordinate of output pixel `(r, c)` under an in-plane rotation.
fn rotation_source(shape: Spatial, angle_deg: f64, r: usize, c: usize) -> (f64, f64) {
    let t = angle_deg.to_radians();
    let (s, co) = (libm::sin(t), libm::cos(t));
    let cr = (shape[0] as f64 - 1.0) / 2.0;
    let cc = (shape[1] as f64 - 1.0) / 2.0;
    let (y, x) = (r as f64 - cr, c as f64 - cc);
    let sy = co * y + s * x + cr;
    let sx = -s * y + co * x + cc;
    (
        sy.clamp(0.0, shape[0] as f64 - 1.0),
        sx.clamp(0.0, shape[1] as f64 - 1.0),
    )
}

pub fn rotate_depth_axis_nearest(data: &[u8], shape: Spatial, angle_deg: f64) -> Vec<u8> {
    let mut out = vec![0u8; data.len()];
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            let (sy, sx) = rotation_source(shape, angle_deg, r, c);
            let (rr, cc) = (libm::round(sy) as usize, libm::round(sx) as usize);
            for z in 0..shape[2] {
                out[idx(shape, r, c, z)] = data[idx(shape, rr, cc, z)];
            }
        }
    }
    out
}

pub fn rotate_depth_axis_linear(data: &[f32], shape: Spatial, angle_deg: f64) -> Vec<f32> {
    let mut out = vec![0f32; data.len()];
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            let (sy, sx) = rotation_source(shape, angle_deg, r, c);
            let (r0, c0) = (libm::floor(sy) as usize, libm::floor(sx) as usize);
            let (r1, c1) = ((r0 + 1).min(shape[0] - 1), (c0 + 1).min(shape[1] - 1));
            let (fy, fx) = (sy - r0 as f64, sx - c0 as f64);
            for z in 0..shape[2] {
                let v = |a: usize, b: usize| data[idx(shape, a, b, z)] as f64;
                let top = v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx;
                let bot = v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx;
                out[idx(shape, r, c, z)] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic(&spec, 3).unwrap();
        let b = gen_synthetic(&spec, 3).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for k in 1..=3u8 {
                assert!(s.labels.contains(&k));
            }
            assert!(structures_touch(&s.labels, s.shape, 2, 1) || structures_touch(&s.labels, s.shape, 2, 3));
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let spec = SyntheticSpec {
            shape: [4, 4, 4],
            radius_hw: (6.0, 7.0),
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec, 1), Err(Error::Placement(_))));
    }

    #[test]
    fn preprocess_constant_and_standardized() {
        assert!(preprocess(&[300.0; 8], CLIP_LO, CLIP_HI).iter().all(|&v| v == 0.0));
        let ramp: Vec<f32> = (0..801).map(|i| i as f32 - 400.0).collect();
        let out = preprocess(&ramp, CLIP_LO, CLIP_HI);
        let n = out.len() as f64;
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn flips_and_identity() {
        let s = gen_one(&SyntheticSpec::default(), 0).unwrap();
        assert_eq!(apply_augment(&s, &AugmentParams::IDENTITY).unwrap(), s);
        let once = apply_augment(&s, &AugmentParams { flips: [true, false, true], angle_deg: 0.0 }).unwrap();
        let twice = apply_augment(&once, &AugmentParams { flips: [true, false, true], angle_deg: 0.0 }).unwrap();
        assert_eq!(twice, s);
        assert_ne!(once.labels, s.labels);
    }
}
