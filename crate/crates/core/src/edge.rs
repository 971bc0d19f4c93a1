//! Reference edge maps, the edge detection sub-network, and the
//! class-balanced binary cross-entropy that supervises it.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::NodeId;
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Real;
use crate::segnet::params::{Conv, ConvUnit, Forward, ParamStore};
use crate::tensor::{Spatial, Tensor};

/// Lower/upper probability clamp applied before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary edge volume. `data` is row-major over `dims`, 1 = edge voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    dims: Vec<usize>,
    data: Vec<u8>,
    positives: usize,
}

impl EdgeMap {
    pub fn new(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() || n == 0 {
            return Err(shape_err!(
                "edge map dims {:?} do not match {} voxels",
                dims,
                data.len()
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid!("edge map values must be 0 or 1"));
        }
        let positives = data.iter().filter(|&&v| v == 1).count();
        Ok(Self {
            dims: dims.to_vec(),
            data,
            positives,
        })
    }

    /// Concatenates maps along a new leading batch axis.
    pub fn batch(maps: &[&EdgeMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| invalid!("empty edge batch"))?;
        let mut data = Vec::new();
        for m in maps {
            if m.dims != first.dims {
                return Err(shape_err!("edge maps {:?} and {:?} differ", first.dims, m.dims));
            }
            data.extend_from_slice(&m.data);
        }
        let mut dims = vec![maps.len()];
        dims.extend_from_slice(&first.dims);
        Self::new(&dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `|P+|`
    pub fn positives(&self) -> usize {
        self.positives
    }

    /// `|P-|`
    pub fn negatives(&self) -> usize {
        self.data.len() - self.positives
    }

    /// Weight of the edge class, `|P-| / (|P+| + |P-|)`.
    pub fn alpha(&self) -> f64 {
        self.negatives() as f64 / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    Canny,
    /// Label transitions: a voxel is an edge iff one of its 8 in-slice
    /// neighbours carries a different label.
    Transition,
}

impl fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Canny => "canny",
            Self::Transition => "transition",
        })
    }
}

impl FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canny" => Ok(Self::Canny),
            "transition" => Ok(Self::Transition),
            _ => Err(invalid!("unknown edge mode {:?} (expected canny|transition)", s)),
        }
    }
}

/// Canny parameters. With `relative` set, the thresholds are fractions of the
/// largest gradient magnitude in the slice; otherwise absolute magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub relative: bool,
    /// Non-maximum suppression keeps a voxel unless a neighbour across the
    /// edge exceeds it by more than this fraction.
    pub nms_tolerance: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low_threshold: 0.1,
            high_threshold: 0.2,
            relative: true,
            nms_tolerance: 0.1,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0)
            || self.low_threshold > self.high_threshold
            || self.low_threshold < 0.0
            || !(0.0..1.0).contains(&self.nms_tolerance)
        {
            return Err(invalid!(
                "canny parameters need sigma > 0 and 0 <= low <= high, got {:?}",
                self
            ));
        }
        Ok(())
    }
}

/// Edge map of a label volume with dims `[H, W, D]`; edges are extracted per
/// axial slice (fixed depth index).
pub fn generate_reference_edges(
    labels: &[u8],
    dims: Spatial,
    num_classes: usize,
    mode: EdgeMode,
    canny: &CannyParams,
) -> Result<EdgeMap> {
    let [h, w, d] = dims;
    if labels.len() != h * w * d {
        return Err(shape_err!(
            "label volume has {} voxels, dims {:?}",
            labels.len(),
            dims
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(invalid!("label {} outside [0, {})", bad, num_classes));
    }
    canny.validate()?;
    let mut out = vec![0u8; labels.len()];
    let mut slice = vec![0u8; h * w];
    for z in 0..d {
        for (i, s) in slice.iter_mut().enumerate() {
            *s = labels[i * d + z];
        }
        let edges = match mode {
            EdgeMode::Transition => transition_slice(&slice, h, w),
            EdgeMode::Canny => {
                let mut acc = vec![false; h * w];
                for class in 1..num_classes {
                    if !slice.iter().any(|&l| l as usize == class) {
                        continue;
                    }
                    let mask: Vec<f64> = slice
                        .iter()
                        .map(|&l| if l as usize == class { 1.0 } else { 0.0 })
                        .collect();
                    for (a, e) in acc.iter_mut().zip(canny_2d(&mask, h, w, canny)) {
                        *a |= e;
                    }
                }
                acc
            }
        };
        for (i, &e) in edges.iter().enumerate() {
            out[i * d + z] = e as u8;
        }
    }
    EdgeMap::new(&[h, w, d], out)
}

fn transition_slice(slice: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = slice[r * w + c];
            'scan: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    if slice[nr as usize * w + nc as usize] != l {
                        out[r * w + c] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn clamp_at(img: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let r = r.clamp(0, h as isize - 1) as usize;
    let c = c.clamp(0, w as isize - 1) as usize;
    img[r * w + c]
}

/// Gaussian smoothing, Sobel gradients, non-maximum suppression and
/// hysteresis on one `h x w` image. Borders replicate. A binary step lies
/// between two voxels, so non-maximum suppression treats near-ties (within
/// `nms_tolerance`) as ties and keeps both flanking voxels.
pub fn canny_2d(img: &[f64], h: usize, w: usize, p: &CannyParams) -> Vec<bool> {
    let radius = libm::ceil(3.0 * p.sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * p.sigma * p.sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = (-radius..=radius)
                .map(|i| kernel[(i + radius) as usize] * clamp_at(img, h, w, r as isize, c as isize + i))
                .sum();
        }
    }
    let mut smooth = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            smooth[r * w + c] = (-radius..=radius)
                .map(|i| kernel[(i + radius) as usize] * clamp_at(&tmp, h, w, r as isize + i, c as isize))
                .sum();
        }
    }
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let at = |dr: isize, dc: isize| clamp_at(&smooth, h, w, r as isize + dr, c as isize + dc);
            let x = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            let y = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
            gx[r * w + c] = x;
            gy[r * w + c] = y;
            mag[r * w + c] = libm::hypot(x, y);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max <= 1e-12 {
        return vec![false; h * w];
    }
    let (low, high) = if p.relative {
        (p.low_threshold * max, p.high_threshold * max)
    } else {
        (p.low_threshold, p.high_threshold)
    };
    let mut thin = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            let m = mag[k];
            if m <= 1e-12 {
                continue;
            }
            // quantize the gradient direction to 0, 45, 90 or 135 degrees
            let angle = libm::atan2(gy[k], gx[k]).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dr, dc) = if !(22.5..157.5).contains(&a) {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let n1 = neighbour(&mag, h, w, r, c, dr, dc);
            let n2 = neighbour(&mag, h, w, r, c, -dr, -dc);
            let keep = 1.0 - p.nms_tolerance;
            if m >= n1 * keep && m >= n2 * keep {
                thin[k] = m;
            }
        }
    }
    let mut out = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (k, &m) in thin.iter().enumerate() {
        if m >= high {
            out[k] = true;
            queue.push_back(k);
        }
    }
    while let Some(k) = queue.pop_front() {
        let (r, c) = ((k / w) as isize, (k % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if !out[n] && thin[n] >= low && thin[n] > 0.0 {
                    out[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    out
}

fn neighbour(mag: &[f64], h: usize, w: usize, r: usize, c: usize, dr: isize, dc: isize) -> f64 {
    let (nr, nc) = (r as isize + dr, c as isize + dc);
    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
        0.0
    } else {
        mag[nr as usize * w + nc as usize]
    }
}

fn check_logits<T: Real>(logits: &Tensor<T>, reference: &EdgeMap) -> Result<()> {
    if logits.len() != reference.len() {
        return Err(shape_err!(
            "edge logits {:?} are not co-registered with reference {:?}",
            logits.shape(),
            reference.dims()
        ));
    }
    Ok(())
}

fn clamped_sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-(1/N) [ sum_{P+} alpha log p + sum_{P-} (1 - alpha) log(1 - p) ]` with
/// `p = sigmoid(logit)` clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce_forward<T: Real>(logits: &Tensor<T>, reference: &EdgeMap) -> Result<f64> {
    check_logits(logits, reference)?;
    let alpha = reference.alpha();
    let n = reference.len() as f64;
    let mut acc = 0.0;
    for (&x, &e) in logits.data().iter().zip(reference.data()) {
        let p = clamped_sigmoid(x.as_f64());
        acc += if e == 1 {
            alpha * libm::log(p)
        } else {
            (1.0 - alpha) * libm::log(1.0 - p)
        };
    }
    Ok(-acc / n)
}

pub fn weighted_bce_backward<T: Real>(logits: &Tensor<T>, reference: &EdgeMap) -> Result<Tensor<T>> {
    check_logits(logits, reference)?;
    let alpha = reference.alpha();
    let n = reference.len() as f64;
    let data = logits
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&x, &e)| {
            let x = x.as_f64();
            let raw = clamped_sigmoid(x);
            let exact = if x >= 0.0 {
                1.0 / (1.0 + libm::exp(-x))
            } else {
                let t = libm::exp(x);
                t / (1.0 + t)
            };
            // the clamp is flat outside [1e-7, 1 - 1e-7]
            if raw != exact && (exact < PROB_CLAMP || exact > 1.0 - PROB_CLAMP) {
                return T::zero();
            }
            let g = if e == 1 {
                -alpha * (1.0 - raw)
            } else {
                (1.0 - alpha) * raw
            };
            T::from_f64(g / n)
        })
        .collect();
    Tensor::new(logits.shape(), data)
}

/// Parameters of the edge detection sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeSubnet {
    /// 1x1x1 unit contracting E5 channels to the E2 channel count.
    pub adapt: ConvUnit,
    pub enc1: ConvUnit,
    pub enc2: ConvUnit,
    /// 1x1x1 convolution to one logit channel.
    pub head: Conv,
}

impl EdgeSubnet {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        e2_channels: usize,
        e5_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            adapt: ConvUnit::register(store, rng, "edge.adapt", e5_channels, e2_channels, 1, 1)?,
            enc1: ConvUnit::register(store, rng, "edge.enc1", e2_channels, e2_channels, 3, 1)?,
            enc2: ConvUnit::register(store, rng, "edge.enc2", e2_channels, e2_channels, 3, 1)?,
            head: Conv::register(store, rng, "edge.head", e2_channels, 1, 1)?,
        })
    }
}

/// Outputs of [`edge_subnet_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeOutputs {
    /// Edge features at E2 resolution.
    pub features: NodeId,
    /// One-channel edge logits resized to the input resolution.
    pub logits: NodeId,
}

/// `F_edge = enc2(enc1(E2 + upsample8(adapt(E5))))`, logits from a 1x1x1 head.
pub fn edge_subnet_forward<T: Real>(
    fw: &mut Forward<'_, T>,
    net: &EdgeSubnet,
    e2: NodeId,
    e5: NodeId,
    full_res: Spatial,
) -> Result<EdgeOutputs> {
    let s2 = fw.tape.value(e2).spatial()?;
    let s5 = fw.tape.value(e5).spatial()?;
    if (0..3).any(|a| s5[a] * 8 != s2[a]) {
        return Err(shape_err!(
            "edge sub-network needs E5 {:?} x8 == E2 {:?}",
            s5,
            s2
        ));
    }
    let adapted = net.adapt.forward(fw, e5)?;
    let up = fw.tape.resize(adapted, s2)?;
    let merged = fw.tape.add(e2, up)?;
    let f1 = net.enc1.forward(fw, merged)?;
    let features = net.enc2.forward(fw, f1)?;
    let native = net.head.forward(fw, features)?;
    let logits = fw.tape.resize(native, full_res)?;
    Ok(EdgeOutputs { features, logits })
}
