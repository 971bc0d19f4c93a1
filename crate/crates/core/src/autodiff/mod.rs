//! Reverse-mode differentiation over a tape of tensor-valued nodes.
//!
//! Every builder method evaluates its primitive eagerly, appends a node that
//! references strictly earlier nodes, and returns the new [`NodeId`].
//! [`Tape::backward`] walks the tape once in reverse from a scalar root.

mod gradcheck;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};

use crate::edge::{weighted_bce_backward, weighted_bce_forward, EdgeMap};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{dag_scan_backward, dag_scan_forward, DagLayout, RfpWeights, ScanStats};
use crate::scalar::Real;
use crate::segnet::loss::{
    cross_entropy_backward, cross_entropy_forward, soft_dice_backward, soft_dice_forward,
    LabelVolume,
};
use crate::tensor::{self, BatchStats, Spatial, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward-rule corruptions used to confirm that gradient checking detects
/// wrong derivatives. Never enabled in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mutation {
    #[default]
    None,
    /// Propagate with `M` where `M^T` belongs (matvec and recurrent scan).
    TransposedRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Mini-batch statistics (gradient flows through them).
    Train,
    /// Fixed running statistics.
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: Spatial,
        padding: Spatial,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Resize(NodeId),
    ConcatChannels(Vec<NodeId>),
    SliceChannels {
        input: NodeId,
        start: usize,
        count: usize,
    },
    ConcatLast(Vec<NodeId>),
    SliceLast {
        input: NodeId,
        start: usize,
        count: usize,
    },
    MatVec {
        matrix: NodeId,
        vector: NodeId,
    },
    DagScan {
        features: NodeId,
        u: NodeId,
        w: NodeId,
        b: NodeId,
        layout: Arc<DagLayout>,
    },
    SoftDice {
        probs: NodeId,
        labels: Arc<LabelVolume>,
        eps: f64,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Arc<LabelVolume>,
    },
    WeightedBce {
        logits: NodeId,
        reference: Arc<EdgeMap>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mutation: Mutation,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `id`; all zeros when `id` does
    /// not influence the root.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]).expect("node shapes are valid"),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]).expect("node shapes are valid"),
        }
    }

    pub fn is_reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mutation: Mutation::None,
        }
    }

    pub fn with_mutation(mutation: Mutation) -> Self {
        Self {
            nodes: Vec::new(),
            mutation,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Input node ids of `id`, all strictly smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Sigmoid(a) | Op::Softmax(a) => vec![*a],
            Op::Resize(a) => vec![*a],
            Op::Conv3d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::SliceLast { input, .. } => vec![*input],
            Op::ConcatChannels(v) | Op::ConcatLast(v) => v.clone(),
            Op::MatVec { matrix, vector } => vec![*matrix, *vector],
            Op::DagScan {
                features, u, w, b, ..
            } => vec![*features, *u, *w, *b],
            Op::SoftDice { probs, .. } | Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::WeightedBce { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(invalid!("node {} is not on this tape", id.0));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        tensor::ensure_same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * factor);
        Ok(self.push(v, Op::Scale(a, factor)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(v, Op::Sum(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::relu(self.value(a));
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::sigmoid(self.value(a));
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = tensor::softmax_channels(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: Spatial,
        padding: Spatial,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let v = tensor::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            v,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization. In [`NormMode::Train`] the mini-batch statistics
    /// are returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: NormMode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        match mode {
            NormMode::Train => {
                let (v, stats) = tensor::batch_norm_train(x, g, b, eps)?;
                let op = Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean: stats.mean.clone(),
                    var: stats.var.clone(),
                    eps,
                    batch_stats: true,
                };
                Ok((self.push(v, op), Some(stats)))
            }
            NormMode::Eval => {
                let v = tensor::batch_norm_eval(x, g, b, running.0, running.1, eps)?;
                let op = Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean: running.0.to_vec(),
                    var: running.1.to_vec(),
                    eps,
                    batch_stats: false,
                };
                Ok((self.push(v, op), None))
            }
        }
    }

    pub fn maxpool3d(&mut self, input: NodeId, window: Spatial, stride: Spatial) -> Result<NodeId> {
        self.check(input)?;
        let p = tensor::maxpool3d(self.value(input), window, stride)?;
        Ok(self.push(
            p.output,
            Op::MaxPool {
                input,
                argmax: p.argmax,
            },
        ))
    }

    pub fn resize(&mut self, input: NodeId, target: Spatial) -> Result<NodeId> {
        self.check(input)?;
        let v = tensor::resize_trilinear(self.value(input), target)?;
        Ok(self.push(v, Op::Resize(input)))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_channels(&refs)?;
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, count: usize) -> Result<NodeId> {
        self.check(input)?;
        let v = tensor::slice_channels(self.value(input), start, count)?;
        Ok(self.push(v, Op::SliceChannels { input, start, count }))
    }

    /// Concatenation along the last (depth) axis.
    pub fn stack_depth(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_last(&refs)?;
        Ok(self.push(v, Op::ConcatLast(parts.to_vec())))
    }

    /// One depth slice, keeping a unit last axis.
    pub fn slice_depth(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        self.check(input)?;
        let v = tensor::slice_last(self.value(input), index, 1)?;
        Ok(self.push(
            v,
            Op::SliceLast {
                input,
                start: index,
                count: 1,
            },
        ))
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        self.check(matrix)?;
        self.check(vector)?;
        let v = tensor::matvec(self.value(matrix), self.value(vector))?;
        Ok(self.push(v, Op::MatVec { matrix, vector }))
    }

    /// Recurrent scan over a single depth slice `[N, C, H, W, 1]` with weights
    /// `u`, `w` (`C x C`) and `b` (`C`). Returns the hidden map (same shape)
    /// and the work counters summed over the batch.
    pub fn dag_scan(
        &mut self,
        features: NodeId,
        u: NodeId,
        w: NodeId,
        b: NodeId,
        layout: Arc<DagLayout>,
    ) -> Result<(NodeId, ScanStats)> {
        for id in [features, u, w, b] {
            self.check(id)?;
        }
        let [n, c, h, wd, d] = self.value(features).dims5()?;
        if d != 1 || h != layout.height || wd != layout.width {
            return Err(shape_err!(
                "scan slice {:?} does not match a {}x{} layout with unit depth",
                self.value(features).shape(),
                layout.height,
                layout.width
            ));
        }
        let weights = RfpWeights::new(
            self.value(u).clone(),
            self.value(w).clone(),
            self.value(b).clone(),
        )?;
        let mut out = Tensor::zeros(&[n, c, h, wd, 1])?;
        let mut stats = ScanStats::default();
        for s in 0..n {
            let hwc = to_hwc(self.value(features), s)?;
            let (hidden, st) = dag_scan_forward(&hwc, &layout, &weights)?;
            from_hwc(&hidden, &mut out, s);
            stats += st;
        }
        let id = self.push(
            out,
            Op::DagScan {
                features,
                u,
                w,
                b,
                layout,
            },
        );
        Ok((id, stats))
    }

    pub fn soft_dice(&mut self, probs: NodeId, labels: Arc<LabelVolume>, eps: f64) -> Result<NodeId> {
        self.check(probs)?;
        let v = soft_dice_forward(self.value(probs), &labels, eps)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::SoftDice { probs, labels, eps },
        ))
    }

    pub fn cross_entropy(&mut self, probs: NodeId, labels: Arc<LabelVolume>) -> Result<NodeId> {
        self.check(probs)?;
        let v = cross_entropy_forward(self.value(probs), &labels)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::CrossEntropy { probs, labels },
        ))
    }

    pub fn weighted_bce(&mut self, logits: NodeId, reference: Arc<EdgeMap>) -> Result<NodeId> {
        self.check(logits)?;
        let v = weighted_bce_forward(self.value(logits), &reference)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::WeightedBce { logits, reference },
        ))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        self.check(root)?;
        if !self.value(root).is_scalar() {
            return Err(shape_err!(
                "backward root must be scalar, node {} has shape {:?}",
                root.0,
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one())?);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            grads[i] = Some(g);
            for (id, c) in contributions {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mutated = self.mutation == Mutation::TransposedRule;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    x.shape(),
                    g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
                )?;
                let gb = Tensor::new(
                    y.shape(),
                    g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * *f))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.data()[0])?)],
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::new(x.shape(), d)?)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::Softmax(a) => vec![(*a, tensor::softmax_channels_backward(&node.value, g)?)],
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dk, db) = tensor::conv3d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                )?;
                let mut v = vec![(*input, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    v.push((*b, db.reshape(self.value(*b).shape())?));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            } => {
                let (dx, dg, db) = tensor::batch_norm_backward(
                    self.value(*input),
                    self.value(*gamma),
                    g,
                    mean,
                    var,
                    *eps,
                    *batch_stats,
                )?;
                vec![
                    (*input, dx),
                    (*gamma, dg.reshape(self.value(*gamma).shape())?),
                    (*beta, db.reshape(self.value(*beta).shape())?),
                ]
            }
            Op::MaxPool { input, argmax } => vec![(
                *input,
                tensor::maxpool3d_backward(self.value(*input).shape(), argmax, g)?,
            )],
            Op::Resize(a) => vec![(
                *a,
                tensor::resize_trilinear_backward(self.value(*a).shape(), g)?,
            )],
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    v.push((p, tensor::slice_channels(g, start, c)?));
                    start += c;
                }
                v
            }
            Op::SliceChannels {
                input,
                start,
                count,
            } => {
                let x = self.value(*input);
                let (outer, ch) = (x.shape()[0], x.shape()[1]);
                let inner = x.len() / (outer * ch);
                let mut d = Tensor::zeros_like(x);
                for n in 0..outer {
                    let dst = (n * ch + start) * inner;
                    let src = n * count * inner;
                    d.data_mut()[dst..dst + count * inner]
                        .copy_from_slice(&g.data()[src..src + count * inner]);
                }
                vec![(*input, d)]
            }
            Op::ConcatLast(parts) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let x = self.value(p);
                    let l = x.shape()[x.ndim() - 1];
                    v.push((p, tensor::slice_last(g, start, l)?));
                    start += l;
                }
                v
            }
            Op::SliceLast {
                input,
                start,
                count,
            } => {
                let x = self.value(*input);
                let l = x.shape()[x.ndim() - 1];
                let rows = x.len() / l;
                let mut d = Tensor::zeros_like(x);
                for r in 0..rows {
                    d.data_mut()[r * l + start..r * l + start + count]
                        .copy_from_slice(&g.data()[r * count..(r + 1) * count]);
                }
                vec![(*input, d)]
            }
            Op::MatVec { matrix, vector } => {
                let (gm, gv) = tensor::matvec_backward(
                    self.value(*matrix),
                    self.value(*vector),
                    g,
                    mutated,
                )?;
                vec![(*matrix, gm), (*vector, gv)]
            }
            Op::DagScan {
                features,
                u,
                w,
                b,
                layout,
            } => {
                let weights = RfpWeights::new(
                    self.value(*u).clone(),
                    self.value(*w).clone(),
                    self.value(*b).clone(),
                )?;
                let x = self.value(*features);
                let n = x.shape()[0];
                let mut dx = Tensor::zeros_like(x);
                let mut du = Tensor::zeros_like(&weights.u);
                let mut dw = Tensor::zeros_like(&weights.w);
                let mut db = Tensor::zeros_like(&weights.b);
                for s in 0..n {
                    let f = to_hwc(x, s)?;
                    let h = to_hwc(&node.value, s)?;
                    let gh = to_hwc(g, s)?;
                    let sg = dag_scan_backward(&f, layout, &weights, &h, &gh, mutated)?;
                    from_hwc(&sg.features, &mut dx, s);
                    du.add_assign(&sg.u)?;
                    dw.add_assign(&sg.w)?;
                    db.add_assign(&sg.b)?;
                }
                vec![(*features, dx), (*u, du), (*w, dw), (*b, db)]
            }
            Op::SoftDice { probs, labels, eps } => {
                let d = soft_dice_backward(self.value(*probs), labels, *eps)?;
                vec![(*probs, scaled(d, g.data()[0]))]
            }
            Op::CrossEntropy { probs, labels } => {
                let d = cross_entropy_backward(self.value(*probs), labels)?;
                vec![(*probs, scaled(d, g.data()[0]))]
            }
            Op::WeightedBce { logits, reference } => {
                let d = weighted_bce_backward(self.value(*logits), reference)?;
                vec![(*logits, scaled(d, g.data()[0]))]
            }
        })
    }

    /// First node whose value holds a non-finite entry.
    pub fn first_non_finite(&self) -> Option<(NodeId, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .find_map(|(i, n)| n.value.first_non_finite().map(|k| (NodeId(i), k)))
    }

    pub fn ensure_finite(&self, id: NodeId) -> Result<()> {
        match self.value(id).first_non_finite() {
            Some(k) => Err(Error::NonFinite(alloc::format!(
                "node {} element {}",
                id.0,
                k
            ))),
            None => Ok(()),
        }
    }
}

fn scaled<T: Real>(mut t: Tensor<T>, f: T) -> Tensor<T> {
    if f != T::one() {
        t.scale_in_place(f);
    }
    t
}

/// Sample `s` of a `[N, C, H, W, 1]` tensor as `H x W x C`.
fn to_hwc<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [_, c, h, w, _] = x.dims5()?;
    let plane = h * w;
    let src = &x.data()[s * c * plane..(s + 1) * c * plane];
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        for v in 0..plane {
            out[v * c + ch] = src[ch * plane + v];
        }
    }
    Tensor::new(&[h, w, c], out)
}

fn from_hwc<T: Real>(hwc: &Tensor<T>, out: &mut Tensor<T>, s: usize) {
    let (h, w, c) = (hwc.shape()[0], hwc.shape()[1], hwc.shape()[2]);
    let plane = h * w;
    let dst = &mut out.data_mut()[s * c * plane..(s + 1) * c * plane];
    for ch in 0..c {
        for v in 0..plane {
            dst[ch * plane + v] = hwc.data()[v * c + ch];
        }
    }
}
