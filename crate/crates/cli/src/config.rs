//! Flat `key=value` run configuration and its digest.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. The digest is SHA-256 over the canonical rendering (every key, in
//! sorted order, one `key=value` line each), so it changes iff a value does.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rfp_core::data::SyntheticSpec;
use rfp_core::edge::{CannyParams, EdgeMode};
use rfp_core::graph::Neighborhood;
use rfp_core::rfp::FusionMode;
use rfp_core::segnet::{LossWeights, NetworkConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub total_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub val_every: usize,
    /// Stop once mean validation DSC reaches this value; 0 disables.
    pub target_dsc: f64,
    pub augment: bool,
    pub rotation_deg: f64,
    pub edge_mode: EdgeMode,
    pub canny: CannyParams,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        let synth = SyntheticSpec {
            num_structures: network.num_classes - 1,
            ..SyntheticSpec::default()
        };
        Self {
            network,
            total_epochs: 400,
            base_lr: 1e-3,
            weight_decay: 3e-4,
            lr_power: 0.9,
            batch_size: 2,
            seed: 0,
            train_manifest: PathBuf::from("data/train/manifest.txt"),
            val_manifest: PathBuf::from("data/val/manifest.txt"),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 25,
            val_every: 1,
            target_dsc: 0.0,
            augment: true,
            rotation_deg: 15.0,
            edge_mode: EdgeMode::Canny,
            canny: CannyParams::default(),
            synth,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true|false, got {v:?}"))),
    }
}

fn parse_list<const N: usize>(key: &str, v: &str, sep: char) -> CliResult<[usize; N]> {
    let parts: Vec<usize> = v
        .split(sep)
        .map(|p| parse::<usize>(key, p))
        .collect::<CliResult<_>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Config(format!("{key}: expected {N} values separated by {sep:?}, got {v:?}")))
}

fn parse_range(key: &str, v: &str) -> CliResult<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| CliError::Config(format!("{key}: expected lo,hi")))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

fn core_err(e: rfp_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let n = &self.network;
        let s = &self.synth;
        let mut m = BTreeMap::new();
        let sh = n.input_shape;
        m.insert("input_shape", format!("{}x{}x{}", sh[0], sh[1], sh[2]));
        m.insert(
            "stage_channels",
            n.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        m.insert("num_classes", n.num_classes.to_string());
        m.insert("edge_branch", n.edge_branch.to_string());
        m.insert("esc_count", n.esc_count.to_string());
        m.insert("dag_count", n.dag_count.to_string());
        m.insert("neighborhood", n.neighborhood.to_string());
        m.insert("fusion_mode", n.fusion_mode.to_string());
        m.insert("lambda_seg_decoder", format!("{:?}", n.loss_weights.seg_decoder));
        m.insert("lambda_seg_final", format!("{:?}", n.loss_weights.seg_final));
        m.insert("lambda_edge", format!("{:?}", n.loss_weights.edge));
        m.insert("bn_momentum", format!("{:?}", n.bn_momentum));
        m.insert("bn_eps", format!("{:?}", n.bn_eps));
        m.insert("total_epochs", self.total_epochs.to_string());
        m.insert("base_lr", format!("{:?}", self.base_lr));
        m.insert("weight_decay", format!("{:?}", self.weight_decay));
        m.insert("lr_power", format!("{:?}", self.lr_power));
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("train_manifest", self.train_manifest.display().to_string());
        m.insert("val_manifest", self.val_manifest.display().to_string());
        m.insert("output_dir", self.output_dir.display().to_string());
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m.insert("val_every", self.val_every.to_string());
        m.insert("target_dsc", format!("{:?}", self.target_dsc));
        m.insert("augment", self.augment.to_string());
        m.insert("rotation_deg", format!("{:?}", self.rotation_deg));
        m.insert("edge_mode", self.edge_mode.to_string());
        m.insert("canny_sigma", format!("{:?}", self.canny.sigma));
        m.insert("canny_low", format!("{:?}", self.canny.low_threshold));
        m.insert("canny_high", format!("{:?}", self.canny.high_threshold));
        m.insert("canny_relative", self.canny.relative.to_string());
        m.insert("canny_nms_tolerance", format!("{:?}", self.canny.nms_tolerance));
        m.insert("synth_seed", s.seed.to_string());
        m.insert("synth_structures", s.num_structures.to_string());
        m.insert("synth_contrast", format!("{:?}", s.contrast_delta));
        m.insert("synth_noise", format!("{:?}", s.noise_sigma));
        m.insert("synth_adjacency", s.adjacency.to_string());
        m.insert("synth_radius_hw", format!("{:?},{:?}", s.radius_hw.0, s.radius_hw.1));
        m.insert("synth_radius_d", format!("{:?},{:?}", s.radius_d.0, s.radius_d.1));
        m
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let n = &mut self.network;
        match key {
            "input_shape" => n.input_shape = parse_list::<3>(key, v, 'x')?,
            "stage_channels" => n.stage_channels = parse_list::<5>(key, v, ',')?,
            "num_classes" => n.num_classes = parse(key, v)?,
            "edge_branch" => n.edge_branch = parse_bool(key, v)?,
            "esc_count" => n.esc_count = parse(key, v)?,
            "dag_count" => n.dag_count = parse(key, v)?,
            "neighborhood" => n.neighborhood = v.parse::<Neighborhood>().map_err(core_err)?,
            "fusion_mode" => n.fusion_mode = v.parse::<FusionMode>().map_err(core_err)?,
            "lambda_seg_decoder" => n.loss_weights.seg_decoder = parse(key, v)?,
            "lambda_seg_final" => n.loss_weights.seg_final = parse(key, v)?,
            "lambda_edge" => n.loss_weights.edge = parse(key, v)?,
            "bn_momentum" => n.bn_momentum = parse(key, v)?,
            "bn_eps" => n.bn_eps = parse(key, v)?,
            "total_epochs" => self.total_epochs = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_power" => self.lr_power = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_manifest" => self.train_manifest = PathBuf::from(v),
            "val_manifest" => self.val_manifest = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "target_dsc" => self.target_dsc = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "rotation_deg" => self.rotation_deg = parse(key, v)?,
            "edge_mode" => self.edge_mode = v.parse::<EdgeMode>().map_err(core_err)?,
            "canny_sigma" => self.canny.sigma = parse(key, v)?,
            "canny_low" => self.canny.low_threshold = parse(key, v)?,
            "canny_high" => self.canny.high_threshold = parse(key, v)?,
            "canny_relative" => self.canny.relative = parse_bool(key, v)?,
            "canny_nms_tolerance" => self.canny.nms_tolerance = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "synth_structures" => self.synth.num_structures = parse(key, v)?,
            "synth_contrast" => self.synth.contrast_delta = parse(key, v)?,
            "synth_noise" => self.synth.noise_sigma = parse(key, v)?,
            "synth_adjacency" => self.synth.adjacency = parse_bool(key, v)?,
            "synth_radius_hw" => self.synth.radius_hw = parse_range(key, v)?,
            "synth_radius_d" => self.synth.radius_d = parse_range(key, v)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> CliResult<Self> {
        let mut c = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> CliResult<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate().map_err(core_err)?;
        self.canny.validate().map_err(core_err)?;
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be >= 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(CliError::Config("total_epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CliError::Config("base_lr must be > 0 and weight_decay >= 0".into()));
        }
        if self.val_every == 0 {
            return Err(CliError::Config("val_every must be >= 1".into()));
        }
        if self.synth.num_structures + 1 != self.network.num_classes {
            return Err(CliError::Config(format!(
                "synth_structures {} does not match num_classes {}",
                self.synth.num_structures, self.network.num_classes
            )));
        }
        Ok(())
    }

    /// Canonical text: every key in sorted order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        let d = Sha256::digest(self.canonical().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&d);
        out
    }

    /// Synthetic-corpus spec with shape and class count taken from the network.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            shape: self.network.input_shape,
            num_structures: self.network.num_classes - 1,
            ..self.synth.clone()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.network.loss_weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trips() {
        let mut c = RunConfig::default();
        c.set("stage_channels", "4,8,8,8,8").unwrap();
        c.set("input_shape", "32x32x16").unwrap();
        c.set("base_lr", "0.002").unwrap();
        let back = RunConfig::parse_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn every_key_changes_the_digest() {
        let base = RunConfig::default();
        let canon = base.canonical();
        for (k, _) in base.entries() {
            let mut c = base.clone();
            let alt = match k {
                "input_shape" => "16x16x16",
                "stage_channels" => "1,2,3,4,5",
                "neighborhood" => "eight",
                "fusion_mode" => "concat",
                "edge_mode" => "transition",
                "edge_branch" | "augment" | "synth_adjacency" => "false",
                "canny_relative" => "false",
                "train_manifest" | "val_manifest" | "output_dir" => "elsewhere",
                "synth_radius_hw" | "synth_radius_d" => "1.5,2.5",
                "canny_nms_tolerance" | "target_dsc" => "0.25",
                "esc_count" | "dag_count" => "2",
                _ => "3",
            };
            c.set(k, alt).unwrap();
            assert_ne!(c.canonical(), canon, "{k}");
            assert_ne!(c.digest(), base.digest(), "{k}");
        }
    }

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse_str("nope=1").is_err());
        assert!(RunConfig::parse_str("seed").is_err());
        assert!(RunConfig::parse_str("input_shape=16x16").is_err());
        let c = RunConfig::parse_str("# comment\n\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }
}
