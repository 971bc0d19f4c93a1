//! Work counts of slice-wise against volumetric propagation and scan timing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::graph::{build_ucg, dag_scan_forward, induce_dag, Direction, Neighborhood, RfpWeights};
use rfp_core::rfp::{cost_count, CostMode, CostReport};
use rfp_core::Tensor;

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub extent: [usize; 3],
    pub channels: usize,
    pub slice_wise: CostReport,
    pub volumetric: CostReport,
    /// Predecessor visits of the slice-wise scheme for both neighbourhoods.
    pub visits_four: u64,
    pub visits_eight: u64,
    pub time_one: Duration,
    pub time_four: Duration,
}

impl BenchReport {
    pub fn cell_ratio(&self) -> f64 {
        self.slice_wise.cell_updates as f64 / self.volumetric.cell_updates as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.time_one.as_secs_f64() / self.time_four.as_secs_f64()
    }

    pub fn table(&self) -> String {
        let [h, w, d] = self.extent;
        let mut s = String::new();
        let _ = writeln!(s, "extent {h}x{w}x{d}, {} channels", self.channels);
        let _ = writeln!(s, "{:<16}{:>16}{:>20}", "mode", "cell updates", "predecessor visits");
        for r in [&self.slice_wise, &self.volumetric] {
            let _ = writeln!(s, "{:<16}{:>16}{:>20}", r.mode.to_string(), r.cell_updates, r.predecessor_visits);
        }
        let _ = writeln!(s, "cell-update ratio slice_wise/volumetric = {:.4}", self.cell_ratio());
        let _ = writeln!(
            s,
            "slice-wise predecessor visits: four-neighbourhood {}, eight-neighbourhood {}",
            self.visits_four, self.visits_eight
        );
        let _ = writeln!(
            s,
            "scan time: 1 direction {:.3} ms, 4 directions {:.3} ms, ratio {:.3}",
            self.time_one.as_secs_f64() * 1e3,
            self.time_four.as_secs_f64() * 1e3,
            self.time_ratio()
        );
        s
    }
}

/// Median wall-clock of scanning every depth slice over `dirs`.
fn time_scans(
    slices: &[Tensor<f32>],
    layouts: &[rfp_core::graph::DagLayout],
    weights: &RfpWeights<f32>,
    repeats: usize,
) -> CliResult<Duration> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        for s in slices {
            for l in layouts {
                let (h, _) = dag_scan_forward(s, l, weights)?;
                std::hint::black_box(h);
            }
        }
        times.push(t.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}

pub fn run(extent: [usize; 3], channels: usize, neighborhood: Neighborhood, repeats: usize) -> CliResult<BenchReport> {
    let [h, w, d] = extent;
    let slice_wise = cost_count(h, w, d, CostMode::SliceWise, 4, neighborhood)?;
    let volumetric = cost_count(h, w, d, CostMode::Volumetric3d, 4, neighborhood)?;
    let visits_four = cost_count(h, w, d, CostMode::SliceWise, 4, Neighborhood::Four)?.predecessor_visits;
    let visits_eight = cost_count(h, w, d, CostMode::SliceWise, 4, Neighborhood::Eight)?.predecessor_visits;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = build_ucg(h, w, neighborhood)?;
    let layouts: Vec<_> = Direction::ALL.iter().map(|&dir| induce_dag(&graph, dir)).collect();
    let bound = (1.0 / channels as f32).sqrt();
    let mut uniform = |n: usize, b: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-b..b)).collect() };
    let weights = RfpWeights::new(
        Tensor::new(&[channels, channels], uniform(channels * channels, bound))?,
        Tensor::new(&[channels, channels], uniform(channels * channels, bound * 0.5))?,
        Tensor::new(&[channels], uniform(channels, 0.1))?,
    )?;
    let slices = (0..d)
        .map(|_| Tensor::new(&[h, w, channels], uniform(h * w * channels, 1.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let repeats = repeats.max(1);
    // warm-up
    time_scans(&slices, &layouts, &weights, 1)?;
    let time_one = time_scans(&slices, &layouts[..1], &weights, repeats)?;
    let time_four = time_scans(&slices, &layouts, &weights, repeats)?;
    Ok(BenchReport {
        extent,
        channels,
        slice_wise,
        volumetric,
        visits_four,
        visits_eight,
        time_one,
        time_four,
    })
}
