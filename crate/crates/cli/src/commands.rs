//! Argument parsing and the five subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rfp_core::autodiff::Mutation;

use crate::bench;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{gen_data, load_cases};
use crate::error::{CliError, CliResult};
use crate::eval::evaluate;
use crate::fsutil::write_atomic;
use crate::gradsuite::{self, Scope};
use crate::train::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "rfp", version, about = "Volumetric segmentation with recurrent feature propagation")]
pub struct Cli {
    /// Run configuration (flat key=value file).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set total_epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print propagation work counts and scan timings.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the canonical configuration and its digest.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Index of the first case; lets train and validation splits share a seed.
    #[arg(long, default_value_t = 0)]
    pub offset: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub allow_digest_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint's validation manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record file; defaults to `eval.log` next to the checkpoint.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub allow_digest_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Grid extent HxWxD; defaults to the deepest encoder stage of the config.
    #[arg(long)]
    pub extent: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "op")]
    pub scope: String,
    /// Only checks whose name contains this string.
    #[arg(long)]
    pub only: Option<String>,
    /// Corrupt the matvec and scan backward rules; the check must then fail.
    #[arg(long)]
    pub mutate: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Cli {
    /// Config file (or defaults) with `--set` overrides applied.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }

    fn explicit_config(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

fn parse_extent(s: &str) -> CliResult<[usize; 3]> {
    let v: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| CliError::Config(format!("bad extent {s:?}"))))
        .collect::<CliResult<_>>()?;
    v.try_into().map_err(|_| CliError::Config(format!("extent {s:?} must be HxWxD")))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => {
            let cfg = cli.run_config()?;
            let spec = cfg.synthetic_spec();
            let manifest = gen_data(&spec, &a.out, a.count, a.offset, a.force)?;
            println!("wrote {} cases, manifest {}", a.count, manifest.display());
        }
        Command::Train(a) => {
            let cfg = cli.run_config()?;
            cfg.validate()?;
            let edges = cfg.network.edge_branch.then_some((cfg.edge_mode, &cfg.canny));
            let train_cases = load_cases(&cfg.train_manifest, cfg.network.num_classes, edges)?;
            let val_cases = load_cases(&cfg.val_manifest, cfg.network.num_classes, None)?;
            let opts = TrainOptions {
                resume: a.resume.clone(),
                allow_digest_mismatch: a.allow_digest_mismatch,
            };
            let out = train(&cfg, &train_cases, &val_cases, &opts)?;
            println!(
                "trained {} epochs, best validation DSC {:.4} at epoch {}",
                out.epochs_completed, out.best_dsc, out.best_epoch
            );
        }
        Command::Eval(a) => {
            let ck = Checkpoint::read(&a.checkpoint)?;
            let embedded = ck.config()?;
            if embedded.digest() != ck.digest {
                return Err(CliError::format(&a.checkpoint, "embedded config does not match its digest"));
            }
            if cli.explicit_config() {
                let cfg = cli.run_config()?;
                if cfg.digest() != ck.digest && !a.allow_digest_mismatch {
                    return Err(CliError::Refused(format!(
                        "config digest {} differs from checkpoint digest {} (pass --allow-digest-mismatch to evaluate anyway)",
                        hex::encode(cfg.digest()),
                        hex::encode(ck.digest)
                    )));
                }
            }
            let net = ck.network()?;
            let manifest = a.manifest.clone().unwrap_or_else(|| embedded.val_manifest.clone());
            let cases = load_cases(&manifest, embedded.network.num_classes, None)?;
            let report = evaluate(&net, &cases, embedded.batch_size)?;
            print!("{}", report.table());
            let records = a.records.clone().unwrap_or_else(|| {
                a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.log")
            });
            let text: String = report.records().iter().map(|r| format!("{r}\n")).collect();
            write_atomic(&records, text.as_bytes())?;
        }
        Command::Bench(a) => {
            let cfg = cli.run_config()?;
            let extent = match &a.extent {
                Some(s) => parse_extent(s)?,
                None => cfg.network.stage_extent(4),
            };
            let channels = a.channels.unwrap_or(cfg.network.stage_channels[4]);
            let rep = bench::run(extent, channels, cfg.network.neighborhood, a.repeats)?;
            print!("{}", rep.table());
        }
        Command::Gradcheck(a) => {
            let scope: Scope = a.scope.parse()?;
            let mutation = if a.mutate { Mutation::TransposedRule } else { Mutation::None };
            let results = gradsuite::run_scope(scope, a.only.as_deref(), mutation, a.seed)?;
            if results.is_empty() {
                return Err(CliError::Config("no gradient checks matched".into()));
            }
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<8} {:<20} max rel error {:.3e} (tol {:.0e})",
                    r.scope.to_string(),
                    r.name,
                    r.report.max_rel_error(),
                    r.report.tol
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
        }
        Command::ShowConfig => {
            let cfg = cli.run_config()?;
            print!("{}", cfg.canonical());
            println!("# digest {}", hex::encode(cfg.digest()));
        }
    }
    Ok(())
}
