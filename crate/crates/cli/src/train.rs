//! Training driver: epochs with augmentation and poly learning rate,
//! periodic validation, checkpoints and line-oriented log records.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfp_core::data::{apply_augment, AugmentParams, VolumeSample};
use rfp_core::edge::EdgeMap;
use rfp_core::metrics::{dsc, ClassMetrics, MetricsReport};
use rfp_core::segnet::loss::LabelVolume;
use rfp_core::segnet::optim::{poly_lr, AdamW, AdamWConfig};
use rfp_core::segnet::{predict_labels, train_step, Batch, SegNet};
use rfp_core::Tensor;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::dataset::Case;
use crate::error::{CliError, CliResult};

pub const LOG_FILE: &str = "train.log";
pub const LAST: &str = "last.rfpc";
pub const BEST: &str = "best.rfpc";

/// Stream offset for the per-epoch shuffle/augment RNG, kept apart from the
/// weight-initialization streams.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

/// One `key=value` log line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record(pub Vec<(String, String)>);

impl Record {
    pub fn new(event: &str) -> Self {
        Self(vec![("event".into(), event.into())])
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    /// Full-precision float field.
    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.0.push((key.into(), format!("{value:?}")));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(line: &str) -> Option<Self> {
        line.split_whitespace()
            .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> CliResult<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Record::parse(l).ok_or_else(|| CliError::format(path, format!("bad record {l:?}"))))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub allow_digest_mismatch: bool,
}

pub struct TrainOutcome {
    pub net: SegNet<f32>,
    pub records: Vec<Record>,
    pub epochs_completed: usize,
    pub best_dsc: f64,
    pub best_epoch: usize,
    pub last_dsc: Option<f64>,
    pub stopped_early: bool,
}

/// Stacks cases into a mini-batch.
pub fn make_batch(samples: &[VolumeSample], num_classes: usize, with_edges: bool) -> CliResult<Batch<f32>> {
    let first = samples.first().ok_or_else(|| CliError::Config("empty batch".into()))?;
    let shape = first.shape;
    let mut images = Vec::with_capacity(samples.len() * first.voxels());
    for s in samples {
        if s.shape != shape {
            return Err(CliError::Config(format!("batch mixes shapes {:?} and {:?}", shape, s.shape)));
        }
        images.extend_from_slice(&s.image);
    }
    let images = Tensor::new(&[samples.len(), 1, shape[0], shape[1], shape[2]], images)?;
    let labels: Vec<&[u8]> = samples.iter().map(|s| s.labels.as_slice()).collect();
    let labels = Arc::new(LabelVolume::batch(num_classes, shape, &labels)?);
    let edges = if with_edges {
        let maps = samples
            .iter()
            .map(|s| {
                let e = s
                    .edges
                    .clone()
                    .ok_or_else(|| CliError::Config("edge branch enabled but case has no edge map".into()))?;
                Ok(EdgeMap::new(&shape, e)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let refs: Vec<&EdgeMap> = maps.iter().collect();
        Some(Arc::new(EdgeMap::batch(&refs)?))
    } else {
        None
    };
    Ok(Batch { images, labels, edges })
}

/// Predicted label volumes for `cases`, evaluated `batch` at a time.
pub fn predict_cases(net: &SegNet<f32>, cases: &[Case], batch: usize) -> CliResult<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch.max(1)) {
        let shape = chunk[0].sample.shape;
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].sample.voxels());
        for c in chunk {
            data.extend_from_slice(&c.sample.image);
        }
        let images = Tensor::new(&[chunk.len(), 1, shape[0], shape[1], shape[2]], data)?;
        out.extend(predict_labels(net, &images)?);
    }
    Ok(out)
}

/// Validation DSC report (distances are not computed).
pub fn validate(net: &SegNet<f32>, cases: &[Case], batch: usize) -> CliResult<MetricsReport> {
    let k = net.config.num_classes;
    let preds = predict_cases(net, cases, batch)?;
    let mut report = MetricsReport::new(k);
    for (pred, case) in preds.iter().zip(cases) {
        let row = (1..k)
            .map(|c| {
                Ok(ClassMetrics {
                    dsc: dsc(pred, &case.sample.labels, c as u8)?,
                    ..Default::default()
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        report.push(row);
    }
    Ok(report)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);
    rng
}

struct LogSink {
    file: File,
    records: Vec<Record>,
}

impl LogSink {
    fn emit(&mut self, r: Record) -> CliResult<()> {
        log::info!("{r}");
        writeln!(self.file, "{r}").map_err(|e| CliError::io(LOG_FILE, e))?;
        self.records.push(r);
        Ok(())
    }
}

/// Runs (or resumes) training as described by `cfg`.
pub fn train(cfg: &RunConfig, train_cases: &[Case], val_cases: &[Case], opts: &TrainOptions) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    for c in train_cases.iter().chain(val_cases) {
        if c.sample.shape != cfg.network.input_shape {
            return Err(CliError::Config(format!(
                "case {} has shape {:?}, network expects {:?}",
                c.id, c.sample.shape, cfg.network.input_shape
            )));
        }
    }
    if cfg.batch_size == 1 {
        log::warn!("batch_size=1: batch norm statistics come from a single volume");
    }
    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut net = SegNet::<f32>::new(cfg.network.clone(), cfg.seed)?;
    let (mut opt, mut state) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.digest != cfg.digest() && !opts.allow_digest_mismatch {
                return Err(CliError::Refused(format!(
                    "{}: config digest {} does not match the current config {}",
                    path.display(),
                    hex::encode(ck.digest),
                    hex::encode(cfg.digest())
                )));
            }
            ck.load_weights(&mut net)?;
            (ck.optimizer(&net)?, ck.state()?)
        }
        None => (
            AdamW::new(&net.store, opt_cfg),
            TrainState {
                epoch: 0,
                best_dsc: f64::NEG_INFINITY,
                best_epoch: 0,
            },
        ),
    };
    opt.config.weight_decay = cfg.weight_decay;

    let log_path = out_dir.join(LOG_FILE);
    let file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| CliError::io(&log_path, e))?;
    let mut sink = LogSink { file, records: Vec::new() };

    let with_edges = cfg.network.edge_branch;
    let k = cfg.network.num_classes;
    let mut last_dsc = None;
    let mut stopped_early = false;
    let mut epoch = state.epoch;
    while epoch < cfg.total_epochs {
        let started = Instant::now();
        let lr = poly_lr(cfg.base_lr, epoch, cfg.total_epochs, cfg.lr_power);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        let mut scan_updates = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = &train_cases[i].sample;
                    if cfg.augment {
                        Ok(apply_augment(s, &AugmentParams::draw(&mut rng, cfg.rotation_deg))?)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<CliResult<Vec<_>>>()?;
            let batch = make_batch(&samples, k, with_edges)?;
            let step = match train_step(&mut net, &mut opt, &batch, lr) {
                Ok(s) => s,
                Err(e) => {
                    let mut r = Record::new("abort");
                    r.push("epoch", epoch).push("step", steps).push("reason", format!("{e:?}").replace(' ', "_"));
                    sink.emit(r)?;
                    log::error!("training aborted at epoch {epoch}; {} holds the last good state", LAST);
                    return Err(e.into());
                }
            };
            let l = step.loss;
            sums[0] += l.total;
            sums[1] += l.seg_decoder;
            sums[2] += l.seg_final;
            sums[3] += l.edge.unwrap_or(0.0);
            scan_updates += step.scan_stats.cell_updates;
            steps += 1;
        }
        epoch += 1;

        let mut r = Record::new("epoch");
        r.push("epoch", epoch - 1).push_f64("lr", lr);
        let n = steps as f64;
        r.push_f64("loss", sums[0] / n)
            .push_f64("loss_seg_decoder", sums[1] / n)
            .push_f64("loss_seg_final", sums[2] / n);
        if with_edges {
            r.push_f64("loss_edge", sums[3] / n);
        }
        r.push("scan_updates", scan_updates);

        let validate_now = !val_cases.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.total_epochs);
        let mut improved = false;
        if validate_now {
            let rep = validate(&net, val_cases, cfg.batch_size)?;
            let mean = rep.mean_dsc().unwrap_or(0.0);
            for c in 1..k {
                match rep.class_summary(c, |m| m.dsc) {
                    Some(s) => r.push_f64(format!("val_dsc_c{c}"), s.mean),
                    None => r.push(format!("val_dsc_c{c}"), "nan"),
                };
            }
            r.push_f64("val_dsc", mean);
            last_dsc = Some(mean);
            if mean > state.best_dsc {
                state.best_dsc = mean;
                state.best_epoch = epoch;
                improved = true;
            }
        }
        r.push("time_s", format!("{:.3}", started.elapsed().as_secs_f64()));
        sink.emit(r)?;

        state.epoch = epoch;
        let ck = Checkpoint::capture(cfg, &net, &opt, state);
        ck.write(&out_dir.join(LAST))?;
        if improved {
            ck.write(&out_dir.join(BEST))?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            ck.write(&out_dir.join(format!("epoch{epoch:04}.rfpc")))?;
        }
        if cfg.target_dsc > 0.0 && last_dsc.is_some_and(|d| d >= cfg.target_dsc) && validate_now {
            stopped_early = epoch < cfg.total_epochs;
            break;
        }
    }

    let mut r = Record::new("final");
    r.push("epoch", epoch)
        .push_f64("lr", poly_lr(cfg.base_lr, epoch, cfg.total_epochs, cfg.lr_power))
        .push_f64("best_dsc", if state.best_dsc.is_finite() { state.best_dsc } else { 0.0 })
        .push("best_epoch", state.best_epoch)
        .push("parameters", net.parameter_count());
    sink.emit(r)?;

    Ok(TrainOutcome {
        net,
        records: sink.records,
        epochs_completed: epoch,
        best_dsc: state.best_dsc,
        best_epoch: state.best_epoch,
        last_dsc,
        stopped_early,
    })
}
