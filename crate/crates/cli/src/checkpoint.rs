//! `RFPC` checkpoint files.
//!
//! Layout: magic `RFPC`, version `u32`, config digest (32 bytes), canonical
//! config text (`u32` length + UTF-8), metadata text (`u32` length + UTF-8
//! `key=value` lines), tensor count `u32`, then per tensor: name (`u16`
//! length + UTF-8), dtype `u8` (0 = f32), ndim `u8`, dims `u32 x ndim`,
//! little-endian payload.
//!
//! Tensors are every network store entry by name, followed by the optimizer
//! moments as `opt.m.<name>` / `opt.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use rfp_core::segnet::optim::{AdamW, AdamWConfig};
use rfp_core::segnet::SegNet;
use rfp_core::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fsutil::{write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"RFPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub config_text: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Training state that is not part of the network weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_dsc: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, net: &SegNet<f32>, opt: &AdamW<f32>, state: TrainState) -> Self {
        let mut meta = BTreeMap::new();
        let c = opt.config;
        meta.insert("epoch".into(), state.epoch.to_string());
        meta.insert("best_dsc".into(), format!("{:?}", state.best_dsc));
        meta.insert("best_epoch".into(), state.best_epoch.to_string());
        meta.insert("opt.step".into(), opt.step.to_string());
        meta.insert("opt.base_lr".into(), format!("{:?}", cfg.base_lr));
        meta.insert("opt.weight_decay".into(), format!("{:?}", c.weight_decay));
        meta.insert("opt.beta1".into(), format!("{:?}", c.beta1));
        meta.insert("opt.beta2".into(), format!("{:?}", c.beta2));
        meta.insert("opt.eps".into(), format!("{:?}", c.eps));
        meta.insert("parameters".into(), net.parameter_count().to_string());
        let mut tensors: Vec<(String, Tensor<f32>)> =
            net.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (slot, prefix) in [(&opt.m, "opt.m."), (&opt.v, "opt.v.")] {
            for (p, t) in net.store.iter().zip(slot) {
                if let Some(t) = t {
                    tensors.push((format!("{prefix}{}", p.name), t.clone()));
                }
            }
        }
        Self {
            digest: cfg.digest(),
            config_text: cfg.canonical(),
            meta,
            tensors,
        }
    }

    pub fn config(&self) -> CliResult<RunConfig> {
        RunConfig::parse_str(&self.config_text)
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| CliError::Config(format!("checkpoint lacks {key:?}")))?;
        v.parse()
            .map_err(|_| CliError::Config(format!("checkpoint {key:?}: cannot parse {v:?}")))
    }

    pub fn state(&self) -> CliResult<TrainState> {
        Ok(TrainState {
            epoch: self.meta_value("epoch")?,
            best_dsc: self.meta_value("best_dsc")?,
            best_epoch: self.meta_value("best_epoch")?,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the network from the embedded config and loads the weights.
    pub fn network(&self) -> CliResult<SegNet<f32>> {
        let cfg = self.config()?;
        let mut net = SegNet::<f32>::new(cfg.network.clone(), cfg.seed)?;
        self.load_weights(&mut net)?;
        Ok(net)
    }

    /// Overwrites every store entry of `net` with the tensor of the same name.
    pub fn load_weights(&self, net: &mut SegNet<f32>) -> CliResult<()> {
        let names: Vec<String> = net.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| CliError::Config(format!("checkpoint lacks tensor {name:?}")))?;
            net.store.set(&name, t.clone())?;
        }
        if let Some((extra, _)) = self
            .tensors
            .iter()
            .find(|(n, _)| !n.starts_with("opt.") && net.store.find(n).is_none())
        {
            return Err(CliError::Config(format!("checkpoint tensor {extra:?} has no place in this network")));
        }
        Ok(())
    }

    pub fn optimizer(&self, net: &SegNet<f32>) -> CliResult<AdamW<f32>> {
        let config = AdamWConfig {
            beta1: self.meta_value("opt.beta1")?,
            beta2: self.meta_value("opt.beta2")?,
            eps: self.meta_value("opt.eps")?,
            weight_decay: self.meta_value("opt.weight_decay")?,
        };
        let mut opt = AdamW::new(&net.store, config);
        opt.step = self.meta_value("opt.step")?;
        for (i, p) in net.store.iter().enumerate() {
            if opt.m[i].is_some() {
                for (slot, prefix) in [(&mut opt.m, "opt.m."), (&mut opt.v, "opt.v.")] {
                    let key = format!("{prefix}{}", p.name);
                    let t = self
                        .tensor(&key)
                        .ok_or_else(|| CliError::Config(format!("checkpoint lacks tensor {key:?}")))?;
                    if t.shape() != p.value.shape() {
                        return Err(CliError::Config(format!("{key}: shape {:?}", t.shape())));
                    }
                    slot[i] = Some(t.clone());
                }
            }
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        let put_text = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_text(&mut out, &self.config_text);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_text(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, expected RFPC"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let text = |r: &mut Reader| -> CliResult<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("text is not UTF-8"))
        };
        let config_text = text(&mut r)?;
        let meta_text = text(&mut r)?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| r.err(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(r.err(format!("tensor {name}: unknown dtype code {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| r.err("dims overflow"))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| r.err(e.to_string()))?;
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Self {
            digest,
            config_text,
            meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
