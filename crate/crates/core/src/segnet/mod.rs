//! The segmentation network: strided encoder, edge sub-network, decoder with
//! edge skip-connections and deep supervision, optional propagation head, and
//! the composite training objective.

pub mod loss;
pub mod optim;
pub mod params;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, NormMode, Tape};
use crate::edge::{edge_subnet_forward, EdgeMap, EdgeSubnet};
use crate::error::{invalid, Error, Result};
use crate::graph::{Direction, Neighborhood, ScanStats};
use crate::rfp::{rfp_forward, rfp_logits_to_fullres, FusionMode, RfpHead};
use crate::scalar::Real;
use crate::tensor::{Spatial, Tensor};

use loss::{LabelVolume, DICE_EPS};
use params::{apply_bn_updates, BnUpdate, Conv, ConvUnit, Forward, ParamNodes, ParamStore};

pub use optim::{poly_lr, AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub seg_decoder: f64,
    pub seg_final: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg_decoder: 1.0,
            seg_final: 1.0,
            edge: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `H x W x D` of the input volume.
    pub input_shape: Spatial,
    pub stage_channels: [usize; 5],
    pub num_classes: usize,
    /// Edge sub-network and its loss.
    pub edge_branch: bool,
    /// Number of decoder blocks, counted from the full-resolution one, that
    /// receive the edge features.
    pub esc_count: usize,
    /// Scan directions of the propagation head; 0 removes the head.
    pub dag_count: usize,
    pub neighborhood: Neighborhood,
    pub fusion_mode: FusionMode,
    pub loss_weights: LossWeights,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: [160, 160, 64],
            stage_channels: [16, 32, 64, 128, 256],
            num_classes: 9,
            edge_branch: true,
            esc_count: 4,
            dag_count: 4,
            neighborhood: Neighborhood::Four,
            fusion_mode: FusionMode::Sum,
            loss_weights: LossWeights::default(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        for (axis, &n) in ["height", "width", "depth"].iter().zip(&self.input_shape) {
            if n == 0 || n % 16 != 0 {
                return Err(invalid!(
                    "input {} {} must be a positive multiple of 16",
                    axis,
                    n
                ));
            }
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid!("num_classes must lie in [2, 255], got {}", self.num_classes));
        }
        if self.stage_channels.contains(&0) {
            return Err(invalid!("stage channels must be positive: {:?}", self.stage_channels));
        }
        if self.esc_count > 4 || self.dag_count > 4 {
            return Err(invalid!(
                "esc_count {} and dag_count {} must be at most 4",
                self.esc_count,
                self.dag_count
            ));
        }
        if self.esc_count > 0 && !self.edge_branch {
            return Err(invalid!("edge skip-connections need the edge branch"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid!("batch-norm eps must be > 0 and momentum in [0, 1]"));
        }
        Ok(())
    }

    /// Spatial extent of encoder stage `s` (0-based).
    pub fn stage_extent(&self, s: usize) -> Spatial {
        self.input_shape.map(|n| n >> s)
    }

    pub fn directions(&self) -> &'static [Direction] {
        Direction::subset(self.dag_count)
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        let (edge, esc, dag) = match a {
            Ablation::Backbone => (false, 0, 0),
            Ablation::Edge => (true, 0, 0),
            Ablation::EdgeEsc => (true, 4, 0),
            Ablation::Rfp => (false, 0, 4),
            Ablation::Full => (true, 4, 4),
        };
        self.edge_branch = edge;
        self.esc_count = esc;
        self.dag_count = dag;
        self
    }
}

/// Component ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Backbone,
    /// Backbone plus edge branch.
    Edge,
    /// Edge branch with skip-connections into all four decoder blocks.
    EdgeEsc,
    /// Backbone plus propagation head.
    Rfp,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Backbone,
        Ablation::Edge,
        Ablation::EdgeEsc,
        Ablation::Rfp,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Edge => "backbone+ed",
            Self::EdgeEsc => "backbone+ed+escs",
            Self::Rfp => "backbone+rfp",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid!("unknown ablation {:?}", s))
    }
}

/// Layer layout of a network; parameter values live in `store`.
#[derive(Clone, Debug)]
pub struct SegNet<T: Real> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub encoder: [Vec<ConvUnit>; 5],
    pub edge: Option<EdgeSubnet>,
    /// Decoder blocks, index 0 is the full-resolution block.
    pub decoder: [[ConvUnit; 2]; 4],
    pub side: [Conv; 4],
    pub decoder_proj: Conv,
    pub fuse: Conv,
    pub rfp: Option<RfpHead>,
}

/// Independent random stream per module so that enabling one component does
/// not change the initialization of the others.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Real> SegNet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let k = config.num_classes;
        let mut store = ParamStore::new();

        let mut rng = module_rng(seed, 1);
        let mut encoder: [Vec<ConvUnit>; 5] = Default::default();
        encoder[0].push(ConvUnit::register(&mut store, &mut rng, "enc1.0", 1, ch[0], 3, 1)?);
        for s in 1..5 {
            let name = format!("enc{}", s + 1);
            let first_stride = if s == 3 { 1 } else { 2 };
            encoder[s].push(ConvUnit::register(
                &mut store,
                &mut rng,
                &format!("{name}.0"),
                ch[s - 1],
                ch[s],
                3,
                first_stride,
            )?);
            encoder[s].push(ConvUnit::register(&mut store, &mut rng, &format!("{name}.1"), ch[s], ch[s], 3, 1)?);
        }

        let edge = if config.edge_branch {
            Some(EdgeSubnet::register(&mut store, &mut module_rng(seed, 2), ch[1], ch[4])?)
        } else {
            None
        };

        let mut rng = module_rng(seed, 3);
        let mut decoder = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let esc = if i < config.esc_count { ch[1] } else { 0 };
            let cin = ch[i + 1] + ch[i] + esc;
            let a = ConvUnit::register(&mut store, &mut rng, &format!("dec{}.0", i + 1), cin, ch[i], 3, 1)?;
            let b = ConvUnit::register(&mut store, &mut rng, &format!("dec{}.1", i + 1), ch[i], ch[i], 3, 1)?;
            decoder.push([a, b]);
        }
        decoder.reverse();
        let decoder: [[ConvUnit; 2]; 4] = [decoder[0], decoder[1], decoder[2], decoder[3]];

        let mut rng = module_rng(seed, 4);
        let mut side = Vec::with_capacity(4);
        for (i, &c) in ch.iter().take(4).enumerate() {
            side.push(Conv::register(&mut store, &mut rng, &format!("side{}", i + 1), c, k, 1)?);
        }
        let side = [side[0], side[1], side[2], side[3]];
        let decoder_proj = Conv::register(&mut store, &mut rng, "decoder_proj", 4 * k, k, 1)?;

        let head = config.dag_count > 0;
        let fuse = Conv::register(&mut store, &mut module_rng(seed, 5), "fuse", 4 * k, k, 1)?;
        if head {
            // The head's logit block starts at zero, so the initial network
            // computes exactly what the headless variant computes.
            let old = store.get(fuse.kernel).value.clone();
            let widened = Tensor::from_fn(&[k, 5 * k, 1, 1, 1], |i| {
                let (o, j) = (i / (5 * k), i % (5 * k));
                if j < 4 * k {
                    old.data()[o * 4 * k + j]
                } else {
                    T::from_f64(0.0)
                }
            })?;
            *store.value_mut(fuse.kernel) = widened;
        }

        let rfp = if head {
            Some(RfpHead::register(
                &mut store,
                &mut module_rng(seed, 6),
                ch[4],
                config.stage_extent(4),
                k,
                config.directions(),
                config.neighborhood,
                config.fusion_mode,
            )?)
        } else {
            None
        };

        Ok(Self {
            config,
            store,
            encoder,
            edge,
            decoder,
            side,
            decoder_proj,
            fuse,
            rfp,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Same layout with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            edge: self.edge,
            decoder: self.decoder,
            side: self.side,
            decoder_proj: self.decoder_proj,
            fuse: self.fuse,
            rfp: self.rfp.clone(),
        }
    }

    /// Forward pass of a batch `[N, 1, H, W, D]` already on the tape.
    pub fn forward(&self, fw: &mut Forward<'_, T>, input: NodeId) -> Result<ForwardOutputs> {
        let shape = fw.tape.value(input).dims5()?;
        let full = self.config.input_shape;
        if shape[1] != 1 || [shape[2], shape[3], shape[4]] != full {
            return Err(crate::error::shape_err!(
                "network expects [N, 1, {}, {}, {}], got {:?}",
                full[0],
                full[1],
                full[2],
                shape
            ));
        }

        let mut enc = [input; 5];
        let mut x = input;
        for (s, units) in self.encoder.iter().enumerate() {
            if s == 3 {
                x = fw.tape.maxpool3d(x, [2; 3], [2; 3])?;
            }
            for u in units {
                x = u.forward(fw, x)?;
            }
            enc[s] = x;
        }

        let edge = match &self.edge {
            Some(net) => Some(edge_subnet_forward(fw, net, enc[1], enc[4], full)?),
            None => None,
        };

        let mut dec = [input; 4];
        let mut prev = enc[4];
        for i in (0..4).rev() {
            let extent = self.config.stage_extent(i);
            let up = fw.tape.resize(prev, extent)?;
            let mut parts = Vec::with_capacity(3);
            parts.push(up);
            parts.push(enc[i]);
            if i < self.config.esc_count {
                let e = edge.ok_or_else(|| invalid!("edge skip-connection without edge branch"))?;
                parts.push(fw.tape.resize(e.features, extent)?);
            }
            let cat = fw.tape.concat_channels(&parts)?;
            let [a, b] = &self.decoder[i];
            let y = a.forward(fw, cat)?;
            prev = b.forward(fw, y)?;
            dec[i] = prev;
        }

        let mut side_outputs = [input; 4];
        for i in 0..4 {
            let s = self.side[i].forward(fw, dec[i])?;
            side_outputs[i] = fw.tape.resize(s, full)?;
        }
        let side_cat = fw.tape.concat_channels(&side_outputs)?;
        let decoder_scores = self.decoder_proj.forward(fw, side_cat)?;

        let mut scan_stats = ScanStats::default();
        let (rfp_logits, enhanced) = match &self.rfp {
            Some(head) => {
                let out = rfp_forward(fw, head, enc[4])?;
                scan_stats = out.stats;
                (Some(rfp_logits_to_fullres(fw, out.logits, full)?), Some(out.enhanced))
            }
            None => (None, None),
        };
        let fuse_in = match rfp_logits {
            Some(r) => {
                let mut parts = side_outputs.to_vec();
                parts.push(r);
                fw.tape.concat_channels(&parts)?
            }
            None => side_cat,
        };
        let final_logits = self.fuse.forward(fw, fuse_in)?;

        Ok(ForwardOutputs {
            encoder: enc,
            decoder: dec,
            side_outputs,
            decoder_scores,
            edge_features: edge.map(|e| e.features),
            edge_logits: edge.map(|e| e.logits),
            rfp_enhanced: enhanced,
            rfp_logits,
            final_logits,
            scan_stats,
        })
    }
}

/// Tape nodes produced by [`SegNet::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOutputs {
    pub encoder: [NodeId; 5],
    /// Decoder features, index 0 at full resolution.
    pub decoder: [NodeId; 4],
    /// Side-output logits resized to full resolution, index 0 from the
    /// full-resolution block.
    pub side_outputs: [NodeId; 4],
    /// 1x1x1 projection of the concatenated side-outputs.
    pub decoder_scores: NodeId,
    pub edge_features: Option<NodeId>,
    pub edge_logits: Option<NodeId>,
    pub rfp_enhanced: Option<NodeId>,
    pub rfp_logits: Option<NodeId>,
    pub final_logits: NodeId,
    pub scan_stats: ScanStats,
}

/// `soft Dice + cross-entropy` of `softmax(logits)`.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, logits: NodeId, labels: &Arc<LabelVolume>) -> Result<NodeId> {
    let probs = tape.softmax_channels(logits)?;
    let dice = tape.soft_dice(probs, labels.clone(), DICE_EPS)?;
    let ce = tape.cross_entropy(probs, labels.clone())?;
    tape.add(dice, ce)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossNodes {
    pub total: NodeId,
    pub seg_decoder: NodeId,
    pub seg_final: NodeId,
    pub edge: Option<NodeId>,
}

/// Scalar values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub seg_decoder: f64,
    pub seg_final: f64,
    pub edge: Option<f64>,
}

impl LossRecord {
    pub fn read<T: Real>(tape: &Tape<T>, nodes: &LossNodes) -> Self {
        let v = |id: NodeId| tape.value(id).data()[0].as_f64();
        Self {
            total: v(nodes.total),
            seg_decoder: v(nodes.seg_decoder),
            seg_final: v(nodes.seg_final),
            edge: nodes.edge.map(v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.seg_decoder.is_finite()
            && self.seg_final.is_finite()
            && self.edge.is_none_or(f64::is_finite)
    }

    pub fn describe(&self) -> String {
        let edge = match self.edge {
            Some(e) => format!("{e}"),
            None => String::from("absent"),
        };
        format!(
            "total={} seg_decoder={} seg_final={} edge={}",
            self.total, self.seg_decoder, self.seg_final, edge
        )
    }
}

/// Weighted sum of the decoder-score, final and edge losses.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &ForwardOutputs,
    labels: &Arc<LabelVolume>,
    edges: Option<&Arc<EdgeMap>>,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let seg_decoder = seg_loss(tape, outputs.decoder_scores, labels)?;
    let seg_final = seg_loss(tape, outputs.final_logits, labels)?;
    let a = tape.scale(seg_decoder, T::from_f64(weights.seg_decoder))?;
    let b = tape.scale(seg_final, T::from_f64(weights.seg_final))?;
    let mut total = tape.add(a, b)?;
    let edge = match (outputs.edge_logits, edges) {
        (Some(logits), Some(reference)) => {
            let e = tape.weighted_bce(logits, reference.clone())?;
            let scaled = tape.scale(e, T::from_f64(weights.edge))?;
            total = tape.add(total, scaled)?;
            Some(e)
        }
        (Some(_), None) => return Err(invalid!("edge branch enabled but no reference edges given")),
        (None, _) => None,
    };
    Ok(LossNodes {
        total,
        seg_decoder,
        seg_final,
        edge,
    })
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[N, 1, H, W, D]`
    pub images: Tensor<T>,
    pub labels: Arc<LabelVolume>,
    pub edges: Option<Arc<EdgeMap>>,
}

/// Result of [`train_step`].
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub loss: LossRecord,
    pub scan_stats: ScanStats,
}

/// Forward, backward and one optimizer update at learning rate `lr`. A
/// non-finite loss or gradient leaves the parameters untouched and returns
/// [`Error::NonFinite`] naming the loss components.
pub fn train_step<T: Real>(net: &mut SegNet<T>, opt: &mut AdamW<T>, batch: &Batch<T>, lr: f64) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let nodes = net.store.leaves(&mut tape);
    let input = tape.leaf(batch.images.clone());
    let (loss_nodes, outputs, bn): (LossNodes, ForwardOutputs, Vec<BnUpdate>) = {
        let mut fw = Forward::new(&mut tape, &net.store, &nodes, NormMode::Train, net.config.bn_eps);
        let outputs = net.forward(&mut fw, input)?;
        let bn = core::mem::take(&mut fw.bn_updates);
        let loss = total_loss(fw.tape, &outputs, &batch.labels, batch.edges.as_ref(), &net.config.loss_weights)?;
        (loss, outputs, bn)
    };
    let record = LossRecord::read(&tape, &loss_nodes);
    if !record.is_finite() {
        return Err(Error::NonFinite(format!("loss components: {}", record.describe())));
    }
    let mut grads = tape.backward(loss_nodes.total)?;
    let mut collected = Vec::new();
    for (i, node) in nodes.0.iter().enumerate() {
        if let Some(id) = node {
            let g = grads.take(*id);
            if let Some(j) = g.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at entry {} ({})",
                    net.store.get(i).name,
                    j,
                    record.describe()
                )));
            }
            collected.push((i, g));
        }
    }
    opt.step(&mut net.store, &collected, lr)?;
    apply_bn_updates(&mut net.store, &bn, net.config.bn_momentum);
    Ok(StepRecord {
        loss: record,
        scan_stats: outputs.scan_stats,
    })
}

/// Inference-mode probabilities `[N, K, H, W, D]`.
pub fn predict_probs<T: Real>(net: &SegNet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let nodes = net.store.leaves(&mut tape);
    let input = tape.leaf(images.clone());
    let mut fw = Forward::new(&mut tape, &net.store, &nodes, NormMode::Eval, net.config.bn_eps);
    let out = net.forward(&mut fw, input)?;
    let p = tape.softmax_channels(out.final_logits)?;
    Ok(tape.value(p).clone())
}

/// Per-voxel argmax labels, one `H*W*D` vector per batch entry.
pub fn predict_labels<T: Real>(net: &SegNet<T>, images: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let probs = predict_probs(net, images)?;
    let [n, k, h, w, d] = probs.dims5()?;
    let vol = h * w * d;
    let p = probs.data();
    Ok((0..n)
        .map(|b| {
            (0..vol)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if p[(b * k + c) * vol + i] > p[(b * k + best) * vol + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Evaluates the network with externally supplied parameter nodes, for
/// finite-difference checks over the trainable parameters in store order.
pub fn forward_with_nodes<T: Real>(
    net: &SegNet<T>,
    tape: &mut Tape<T>,
    params: &[NodeId],
    images: &Tensor<T>,
    mode: NormMode,
) -> Result<(ForwardOutputs, ParamNodes)> {
    let nodes = ParamNodes::from_trainable(&net.store, params)?;
    let input = tape.leaf(images.clone());
    let mut fw = Forward::new(tape, &net.store, &nodes, mode, net.config.bn_eps);
    let out = net.forward(&mut fw, input)?;
    Ok((out, nodes))
}
