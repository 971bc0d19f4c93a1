//! Grid graphs, their four directed acyclic scan orientations, and the
//! recurrent propagation `h(v) = ReLU(U f(v) + W * sum_{p in pred(v)} h(p) + b)`
//! evaluated vertex by vertex in scan order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{ensure_same_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl fmt::Display for Neighborhood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Four => "four",
            Self::Eight => "eight",
        })
    }
}

impl FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four" | "4" => Ok(Self::Four),
            "eight" | "8" => Ok(Self::Eight),
            _ => Err(invalid!("unknown neighborhood {:?} (expected four|eight)", s)),
        }
    }
}

/// Scan direction, named after where the sweep heads: `DownRight` starts at
/// the top-left vertex, `UpLeft` at the bottom-right one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    DownRight,
    DownLeft,
    UpRight,
    UpLeft,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::DownRight,
        Direction::DownLeft,
        Direction::UpRight,
        Direction::UpLeft,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::DownRight => "dr",
            Self::DownLeft => "dl",
            Self::UpRight => "ur",
            Self::UpLeft => "ul",
        }
    }

    /// Direction subsets used when fewer than four DAGs are enabled:
    /// `{dr}`, `{dr, ul}`, `{dr, ul, dl}`, then all four.
    pub fn subset(count: usize) -> &'static [Direction] {
        const ORDER: [Direction; 4] = [
            Direction::DownRight,
            Direction::UpLeft,
            Direction::DownLeft,
            Direction::UpRight,
        ];
        &ORDER[..count.min(4)]
    }

    fn rows_down(self) -> bool {
        matches!(self, Self::DownRight | Self::DownLeft)
    }

    fn cols_right(self) -> bool {
        matches!(self, Self::DownRight | Self::UpRight)
    }
}

/// Undirected grid graph over `height x width` vertices, vertex id `r * width + c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridGraph {
    pub height: usize,
    pub width: usize,
    pub neighborhood: Neighborhood,
    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(u32, u32)>,
}

pub fn build_ucg(height: usize, width: usize, neighborhood: Neighborhood) -> Result<GridGraph> {
    if height == 0 || width == 0 {
        return Err(invalid!("grid extents must be >= 1, got {}x{}", height, width));
    }
    let id = |r: usize, c: usize| (r * width + c) as u32;
    let mut edges = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if c + 1 < width {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < height {
                edges.push((id(r, c), id(r + 1, c)));
            }
            if neighborhood == Neighborhood::Eight && r + 1 < height {
                if c + 1 < width {
                    edges.push((id(r, c), id(r + 1, c + 1)));
                }
                if c > 0 {
                    edges.push((id(r, c), id(r + 1, c - 1)));
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(GridGraph {
        height,
        width,
        neighborhood,
        edges,
    })
}

impl GridGraph {
    pub fn vertex_count(&self) -> usize {
        self.height * self.width
    }

    pub fn expected_edge_count(height: usize, width: usize, neighborhood: Neighborhood) -> usize {
        let axis = height * (width - 1) + width * (height - 1);
        match neighborhood {
            Neighborhood::Four => axis,
            Neighborhood::Eight => axis + 2 * (height - 1) * (width - 1),
        }
    }
}

/// One acyclic orientation of a [`GridGraph`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DagLayout {
    pub direction: Direction,
    pub height: usize,
    pub width: usize,
    pub scan_order: Vec<u32>,
    /// Direct predecessors of each vertex (indexed by vertex id), sorted by scan rank.
    pub predecessors: Vec<Vec<u32>>,
}

pub fn induce_dag(graph: &GridGraph, direction: Direction) -> DagLayout {
    let (h, w) = (graph.height, graph.width);
    let mut scan_order = Vec::with_capacity(h * w);
    for i in 0..h {
        let r = if direction.rows_down() { i } else { h - 1 - i };
        for j in 0..w {
            let c = if direction.cols_right() { j } else { w - 1 - j };
            scan_order.push((r * w + c) as u32);
        }
    }
    let mut rank = vec![0usize; h * w];
    for (i, &v) in scan_order.iter().enumerate() {
        rank[v as usize] = i;
    }
    let mut predecessors = vec![Vec::new(); h * w];
    for &(a, b) in &graph.edges {
        let (from, to) = if rank[a as usize] < rank[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        predecessors[to as usize].push(from);
    }
    for p in &mut predecessors {
        p.sort_unstable_by_key(|&v| rank[v as usize]);
    }
    DagLayout {
        direction,
        height: h,
        width: w,
        scan_order,
        predecessors,
    }
}

impl DagLayout {
    pub fn vertex_count(&self) -> usize {
        self.height * self.width
    }

    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0usize; self.scan_order.len()];
        for (i, &v) in self.scan_order.iter().enumerate() {
            rank[v as usize] = i;
        }
        rank
    }

    /// Every predecessor precedes its successor in `scan_order`, and
    /// `scan_order` is a permutation.
    pub fn is_topologically_ordered(&self) -> bool {
        let n = self.vertex_count();
        if self.scan_order.len() != n || self.predecessors.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &v in &self.scan_order {
            if (v as usize) >= n || seen[v as usize] {
                return false;
            }
            for &p in &self.predecessors[v as usize] {
                if !seen[p as usize] {
                    return false;
                }
            }
            seen[v as usize] = true;
        }
        true
    }

    /// Directed edges `(from, to)`.
    pub fn directed_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (to, preds) in self.predecessors.iter().enumerate() {
            for &from in preds {
                out.push((from, to as u32));
            }
        }
        out
    }

    pub fn predecessor_visits(&self) -> u64 {
        self.predecessors.iter().map(|p| p.len() as u64).sum()
    }
}

/// Recurrent parameters of one scan: `U`, `W` are `C x C`, `b` has `C` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RfpWeights<T> {
    pub u: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> RfpWeights<T> {
    pub fn new(u: Tensor<T>, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let c = b.len();
        if u.shape() != [c, c] || w.shape() != [c, c] {
            return Err(shape_err!(
                "recurrent weights must be square {}x{}: U {:?}, W {:?}, b {:?}",
                c,
                c,
                u.shape(),
                w.shape(),
                b.shape()
            ));
        }
        Ok(Self { u, w, b })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[channels, channels])?,
            Tensor::zeros(&[channels, channels])?,
            Tensor::zeros(&[channels])?,
        )
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }
}

/// Work counters of one or more scans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub cell_updates: u64,
    pub predecessor_visits: u64,
}

impl core::ops::AddAssign for ScanStats {
    fn add_assign(&mut self, rhs: Self) {
        self.cell_updates += rhs.cell_updates;
        self.predecessor_visits += rhs.predecessor_visits;
    }
}

fn check_features<T: Real>(features: &Tensor<T>, layout: &DagLayout, channels: usize) -> Result<()> {
    if features.shape() != [layout.height, layout.width, channels] {
        return Err(shape_err!(
            "scan features {:?} do not match grid {}x{} with {} channels",
            features.shape(),
            layout.height,
            layout.width,
            channels
        ));
    }
    Ok(())
}

#[inline]
fn gemv_acc<T: Real>(out: &mut [T], m: &[T], v: &[T]) {
    let c = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * c..(i + 1) * c];
        let mut acc = T::zero();
        for (&a, &b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o += acc;
    }
}

#[inline]
fn gemv_t_acc<T: Real>(out: &mut [T], m: &[T], v: &[T]) {
    let c = out.len();
    for (i, &g) in v.iter().enumerate() {
        let row = &m[i * c..(i + 1) * c];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * g;
        }
    }
}

/// Forward scan over `features` laid out `H x W x C`. Vertices without
/// predecessors use a zero predecessor summary.
pub fn dag_scan_forward<T: Real>(
    features: &Tensor<T>,
    layout: &DagLayout,
    weights: &RfpWeights<T>,
) -> Result<(Tensor<T>, ScanStats)> {
    let c = weights.channels();
    check_features(features, layout, c)?;
    if let Some(i) = features.first_non_finite() {
        return Err(Error::NonFinite(alloc::format!(
            "scan input element {} is not finite",
            i
        )));
    }
    let f = features.data();
    let (u, w, b) = (weights.u.data(), weights.w.data(), weights.b.data());
    let mut hidden = vec![T::zero(); f.len()];
    let mut summary = vec![T::zero(); c];
    let mut pre = vec![T::zero(); c];
    let mut stats = ScanStats::default();
    for &v in &layout.scan_order {
        let v = v as usize;
        summary.fill(T::zero());
        for &p in &layout.predecessors[v] {
            let p = p as usize;
            for (s, &hv) in summary.iter_mut().zip(&hidden[p * c..(p + 1) * c]) {
                *s += hv;
            }
        }
        pre.copy_from_slice(b);
        gemv_acc(&mut pre, u, &f[v * c..(v + 1) * c]);
        gemv_acc(&mut pre, w, &summary);
        for (hv, &z) in hidden[v * c..(v + 1) * c].iter_mut().zip(&pre) {
            *hv = if z > T::zero() { z } else { T::zero() };
        }
        stats.cell_updates += 1;
        stats.predecessor_visits += layout.predecessors[v].len() as u64;
    }
    Ok((Tensor::new(features.shape(), hidden)?, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads<T> {
    pub features: Tensor<T>,
    pub u: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Reverse pass of [`dag_scan_forward`]. `transposed_rule` replaces `W^T` by
/// `W` when propagating to predecessors; it exists only as a mutation probe.
pub fn dag_scan_backward<T: Real>(
    features: &Tensor<T>,
    layout: &DagLayout,
    weights: &RfpWeights<T>,
    hidden: &Tensor<T>,
    grad_hidden: &Tensor<T>,
    transposed_rule: bool,
) -> Result<ScanGrads<T>> {
    let c = weights.channels();
    check_features(features, layout, c)?;
    ensure_same_shape(features, hidden, "scan backward hidden")?;
    ensure_same_shape(features, grad_hidden, "scan backward gradient")?;
    let (f, h) = (features.data(), hidden.data());
    let (u, w) = (weights.u.data(), weights.w.data());
    let mut dh = grad_hidden.data().to_vec();
    let mut df = vec![T::zero(); f.len()];
    let mut du = vec![T::zero(); c * c];
    let mut dw = vec![T::zero(); c * c];
    let mut db = vec![T::zero(); c];
    let mut summary = vec![T::zero(); c];
    let mut dpre = vec![T::zero(); c];
    let mut dsummary = vec![T::zero(); c];
    for &v in layout.scan_order.iter().rev() {
        let v = v as usize;
        let mut active = false;
        for i in 0..c {
            dpre[i] = if h[v * c + i] > T::zero() {
                active = true;
                dh[v * c + i]
            } else {
                T::zero()
            };
        }
        if !active {
            continue;
        }
        summary.fill(T::zero());
        for &p in &layout.predecessors[v] {
            let p = p as usize;
            for (s, &hv) in summary.iter_mut().zip(&h[p * c..(p + 1) * c]) {
                *s += hv;
            }
        }
        let fv = &f[v * c..(v + 1) * c];
        for i in 0..c {
            let g = dpre[i];
            db[i] += g;
            for j in 0..c {
                du[i * c + j] += g * fv[j];
                dw[i * c + j] += g * summary[j];
            }
        }
        gemv_t_acc(&mut df[v * c..(v + 1) * c], u, &dpre);
        if layout.predecessors[v].is_empty() {
            continue;
        }
        dsummary.fill(T::zero());
        if transposed_rule {
            gemv_acc(&mut dsummary, w, &dpre);
        } else {
            gemv_t_acc(&mut dsummary, w, &dpre);
        }
        for &p in &layout.predecessors[v] {
            let p = p as usize;
            for (d, &s) in dh[p * c..(p + 1) * c].iter_mut().zip(&dsummary) {
                *d += s;
            }
        }
    }
    Ok(ScanGrads {
        features: Tensor::new(features.shape(), df)?,
        u: Tensor::new(&[c, c], du)?,
        w: Tensor::new(&[c, c], dw)?,
        b: Tensor::new(&[c], db)?,
    })
}

/// Elementwise sum of the per-direction hidden maps.
pub fn fuse_directions<T: Real>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| invalid!("fusing an empty set of direction maps"))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        out.add_assign(m)?;
    }
    Ok(out)
}
