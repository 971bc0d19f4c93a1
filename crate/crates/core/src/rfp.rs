//! Recurrent feature propagation head: depth slices of the deepest encoder
//! feature are scanned along grid DAGs with per-slice weights, stacked back,
//! added residually and projected to class logits. Also the analytic cost
//! model comparing slice-wise scans against a volumetric recurrent network.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::NodeId;
use crate::error::{invalid, Error, Result};
use crate::graph::{build_ucg, induce_dag, DagLayout, Direction, GridGraph, Neighborhood, ScanStats};
use crate::scalar::Real;
use crate::segnet::params::{init_uniform, Conv, Forward, ParamKind, ParamStore};
use crate::tensor::{Spatial, Tensor};

/// How per-direction hidden maps of one slice are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Sum,
    /// Channel concatenation followed by a 1x1x1 projection back to `C`.
    Concat,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            _ => Err(invalid!("unknown fusion mode {:?} (expected sum|concat)", s)),
        }
    }
}

/// Store indices of one direction's `U`, `W`, `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanParams {
    pub u: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub struct RfpHead {
    pub channels: usize,
    pub depth: usize,
    pub directions: Vec<Direction>,
    pub layouts: Vec<Arc<DagLayout>>,
    /// `slices[d][k]` holds the weights of slice `d`, direction `directions[k]`.
    pub slices: Vec<Vec<ScanParams>>,
    pub fusion: FusionMode,
    pub fuse: Option<Conv>,
    pub proj: Conv,
}

impl RfpHead {
    /// Registers `depth x directions` weight triples plus the projection.
    /// `U ~ U(-sqrt(3/C), sqrt(3/C))`, `W` with half that bound, `b = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        channels: usize,
        grid: Spatial,
        num_classes: usize,
        directions: &[Direction],
        neighborhood: Neighborhood,
        fusion: FusionMode,
    ) -> Result<Self> {
        if directions.is_empty() {
            return Err(invalid!("the propagation head needs at least one scan direction"));
        }
        let [h, w, depth] = grid;
        let graph = build_ucg(h, w, neighborhood)?;
        let layouts = directions
            .iter()
            .map(|&d| Arc::new(induce_dag(&graph, d)))
            .collect();
        let bound = libm::sqrt(3.0 / channels as f64);
        let mut slices = Vec::with_capacity(depth);
        for d in 0..depth {
            let mut per_dir = Vec::with_capacity(directions.len());
            for dir in directions {
                let name = format!("rfp.slice{d}.{}", dir.short_name());
                let u = store.insert(
                    &format!("{name}.u"),
                    init_uniform(rng, &[channels, channels], bound)?,
                    ParamKind::Trainable,
                )?;
                let wi = store.insert(
                    &format!("{name}.w"),
                    init_uniform(rng, &[channels, channels], bound * 0.5)?,
                    ParamKind::Trainable,
                )?;
                let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?;
                per_dir.push(ScanParams { u, w: wi, b });
            }
            slices.push(per_dir);
        }
        let fuse = match fusion {
            FusionMode::Sum => None,
            FusionMode::Concat => Some(Conv::register(
                store,
                rng,
                "rfp.fuse",
                channels * directions.len(),
                channels,
                1,
            )?),
        };
        let proj = Conv::register(store, rng, "rfp.proj", channels, num_classes, 1)?;
        Ok(Self {
            channels,
            depth,
            directions: directions.to_vec(),
            layouts,
            slices,
            fusion,
            fuse,
            proj,
        })
    }
}

/// Outputs of [`rfp_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfpOutputs {
    /// Stacked hidden slices `H`.
    pub hidden: NodeId,
    /// `E5 + H`
    pub enhanced: NodeId,
    /// Class logits at the resolution of `E5`.
    pub logits: NodeId,
    /// Work counters summed over slices, directions and batch entries.
    pub stats: ScanStats,
}

pub fn rfp_forward<T: Real>(fw: &mut Forward<'_, T>, head: &RfpHead, e5: NodeId) -> Result<RfpOutputs> {
    let [_, c, h, w, d] = fw.tape.value(e5).dims5()?;
    let layout = &head.layouts[0];
    if c != head.channels || d != head.depth || h != layout.height || w != layout.width {
        return Err(crate::error::shape_err!(
            "propagation head built for C={} over {}x{}x{}, got {:?}",
            head.channels,
            layout.height,
            layout.width,
            head.depth,
            fw.tape.value(e5).shape()
        ));
    }
    let mut stats = ScanStats::default();
    let mut hidden_slices = Vec::with_capacity(d);
    for (z, weights) in head.slices.iter().enumerate() {
        let slice = fw.tape.slice_depth(e5, z)?;
        let mut maps = Vec::with_capacity(weights.len());
        for (p, layout) in weights.iter().zip(&head.layouts) {
            let (u, wn, b) = (fw.param(p.u)?, fw.param(p.w)?, fw.param(p.b)?);
            let (hmap, st) = fw.tape.dag_scan(slice, u, wn, b, layout.clone())?;
            stats += st;
            maps.push(hmap);
        }
        let fused = match (&head.fuse, head.fusion) {
            (Some(conv), FusionMode::Concat) => {
                let cat = fw.tape.concat_channels(&maps)?;
                conv.forward(fw, cat)?
            }
            _ => {
                let mut acc = maps[0];
                for &m in &maps[1..] {
                    acc = fw.tape.add(acc, m)?;
                }
                acc
            }
        };
        hidden_slices.push(fused);
    }
    let hidden = if hidden_slices.len() == 1 {
        hidden_slices[0]
    } else {
        fw.tape.stack_depth(&hidden_slices)?
    };
    let enhanced = fw.tape.add(e5, hidden)?;
    let logits = head.proj.forward(fw, enhanced)?;
    Ok(RfpOutputs {
        hidden,
        enhanced,
        logits,
        stats,
    })
}

/// Trilinear resize of head logits to the input resolution.
pub fn rfp_logits_to_fullres<T: Real>(fw: &mut Forward<'_, T>, logits: NodeId, target: Spatial) -> Result<NodeId> {
    fw.tape.resize(logits, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    /// 2D scans per depth slice.
    SliceWise,
    /// A 3D recurrent network over the whole volume: 8 octant sweeps on the
    /// six-connected voxel grid.
    Volumetric3d,
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SliceWise => "slice_wise",
            Self::Volumetric3d => "volumetric_3d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub mode: CostMode,
    pub cell_updates: u64,
    pub predecessor_visits: u64,
}

/// Closed-form work counts of the two propagation schemes. Slice-wise
/// predecessor visits count every edge of the in-slice graph once per
/// direction; volumetric visits count every six-connected edge once per
/// octant sweep.
pub fn cost_count(
    h: usize,
    w: usize,
    d: usize,
    mode: CostMode,
    directions: usize,
    neighborhood: Neighborhood,
) -> Result<CostReport> {
    if h == 0 || w == 0 || d == 0 {
        return Err(invalid!("cost model needs positive extents, got {}x{}x{}", h, w, d));
    }
    let (h64, w64, d64) = (h as u64, w as u64, d as u64);
    let (cell_updates, predecessor_visits) = match mode {
        CostMode::SliceWise => {
            let edges = GridGraph::expected_edge_count(h, w, neighborhood) as u64;
            let dirs = directions as u64;
            (dirs * h64 * w64 * d64, dirs * edges * d64)
        }
        CostMode::Volumetric3d => {
            let edges = (h64 - 1) * w64 * d64 + h64 * (w64 - 1) * d64 + h64 * w64 * (d64 - 1);
            (8 * h64 * w64 * d64, 8 * edges)
        }
    };
    Ok(CostReport {
        mode,
        cell_updates,
        predecessor_visits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_hand_values() {
        let s = cost_count(10, 10, 4, CostMode::SliceWise, 4, Neighborhood::Four).unwrap();
        let v = cost_count(10, 10, 4, CostMode::Volumetric3d, 4, Neighborhood::Four).unwrap();
        assert_eq!(s.cell_updates, 1600);
        assert_eq!(v.cell_updates, 3200);
        assert_eq!(v.cell_updates, 2 * s.cell_updates);
        assert!(cost_count(0, 1, 1, CostMode::SliceWise, 4, Neighborhood::Four).is_err());
    }

    #[test]
    fn fusion_mode_parses() {
        assert_eq!("sum".parse::<FusionMode>().unwrap(), FusionMode::Sum);
        assert_eq!("concat".parse::<FusionMode>().unwrap(), FusionMode::Concat);
        assert!("max".parse::<FusionMode>().is_err());
    }
}
