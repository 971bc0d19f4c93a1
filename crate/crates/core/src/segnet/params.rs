//! Named parameter storage and the convolutional building blocks.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, NormMode, Tape};
use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::{BatchStats, Spatial, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistic, updated by momentum, never by gradients.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(invalid!("duplicate parameter name {:?}", name));
        }
        self.entries.push(Param {
            name: name.to_string(),
            value,
            kind,
        });
        let i = self.entries.len() - 1;
        self.index.insert(name.to_string(), i);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.find(name).map(|i| &self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == ParamKind::Trainable)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .find(name)
            .ok_or_else(|| invalid!("unknown parameter {:?}", name))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(invalid!(
                "parameter {:?} has shape {:?}, got {:?}",
                name,
                self.entries[i].value.shape(),
                value.shape()
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Pushes every trainable parameter onto `tape` as a leaf.
    pub fn leaves(&self, tape: &mut Tape<T>) -> ParamNodes {
        ParamNodes(
            self.entries
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Trainable => Some(tape.leaf(p.value.clone())),
                    ParamKind::Running => None,
                })
                .collect(),
        )
    }
}

/// Tape node of each trainable parameter, indexed like the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamNodes(pub Vec<Option<NodeId>>);

impl ParamNodes {
    /// Assigns `ids` to trainable parameters in store order.
    pub fn from_trainable<T: Real>(store: &ParamStore<T>, ids: &[NodeId]) -> Result<Self> {
        let mut it = ids.iter();
        let mut out = Vec::with_capacity(store.len());
        for p in store.iter() {
            out.push(match p.kind {
                ParamKind::Trainable => Some(
                    *it.next()
                        .ok_or_else(|| invalid!("too few parameter nodes"))?,
                ),
                ParamKind::Running => None,
            });
        }
        if it.next().is_some() {
            return Err(invalid!("too many parameter nodes"));
        }
        Ok(Self(out))
    }

    pub fn node(&self, i: usize) -> Result<NodeId> {
        self.0
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| invalid!("parameter {} has no tape node", i))
    }
}

/// Running-statistic update recorded during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: usize,
    pub var: usize,
    pub stats: BatchStats,
}

/// Mutable state threaded through one forward pass.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub nodes: &'a ParamNodes,
    pub mode: NormMode,
    pub bn_eps: f64,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        nodes: &'a ParamNodes,
        mode: NormMode,
        bn_eps: f64,
    ) -> Self {
        Self {
            tape,
            store,
            nodes,
            mode,
            bn_eps,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, i: usize) -> Result<NodeId> {
        self.nodes.node(i)
    }
}

/// Applies recorded batch statistics to the running estimates:
/// `running = (1 - momentum) * running + momentum * batch`, with the unbiased
/// batch variance.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let n = u.stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = store.value_mut(u.mean);
        for (r, &b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
        }
        let v = store.value_mut(u.var);
        for (r, &b) in v.data_mut().iter_mut().zip(&u.stats.var) {
            *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b * correction);
        }
    }
}

/// Zero-mean uniform kernel with bound `sqrt(6 / fan_in)`.
pub fn init_kernel<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = libm::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

pub fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Plain convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kernel: usize,
    pub bias: usize,
    pub stride: Spatial,
    pub padding: Spatial,
}

impl Conv {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        let kernel = store.insert(
            &alloc::format!("{name}.kernel"),
            init_kernel(rng, &[cout, cin, k, k, k])?,
            ParamKind::Trainable,
        )?;
        let bias = store.insert(
            &alloc::format!("{name}.bias"),
            Tensor::zeros(&[cout])?,
            ParamKind::Trainable,
        )?;
        Ok(Self {
            kernel,
            bias,
            stride: [1; 3],
            padding: [k / 2; 3],
        })
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let (k, b) = (fw.param(self.kernel)?, fw.param(self.bias)?);
        fw.tape.conv3d(x, k, Some(b), self.stride, self.padding)
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub conv: Conv,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut conv = Conv::register(store, rng, name, cin, cout, k)?;
        conv.stride = [stride; 3];
        let gamma = store.insert(
            &alloc::format!("{name}.bn_gamma"),
            Tensor::full(&[cout], T::one())?,
            ParamKind::Trainable,
        )?;
        let beta = store.insert(
            &alloc::format!("{name}.bn_beta"),
            Tensor::zeros(&[cout])?,
            ParamKind::Trainable,
        )?;
        let running_mean = store.insert(
            &alloc::format!("{name}.bn_running_mean"),
            Tensor::zeros(&[cout])?,
            ParamKind::Running,
        )?;
        let running_var = store.insert(
            &alloc::format!("{name}.bn_running_var"),
            Tensor::full(&[cout], T::one())?,
            ParamKind::Running,
        )?;
        Ok(Self {
            conv,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    /// Pre-activation (convolution + batch norm) node.
    pub fn forward_pre<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(fw, x)?;
        let (g, b) = (fw.param(self.gamma)?, fw.param(self.beta)?);
        let rm: Vec<f64> = fw.store.get(self.running_mean).value.data().iter().map(|v| v.as_f64()).collect();
        let rv: Vec<f64> = fw.store.get(self.running_var).value.data().iter().map(|v| v.as_f64()).collect();
        let (z, stats) = fw.tape.batch_norm(y, g, b, fw.mode, (&rm, &rv), fw.bn_eps)?;
        if let Some(stats) = stats {
            fw.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(z)
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let z = self.forward_pre(fw, x)?;
        fw.tape.relu(z)
    }
}
