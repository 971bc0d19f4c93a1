//! Finite-difference gradient checks at micro scale, grouped by scope.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Mutation, NormMode};
use rfp_core::edge::{edge_subnet_forward, EdgeMap, EdgeSubnet};
use rfp_core::graph::{build_ucg, induce_dag, Direction, Neighborhood};
use rfp_core::rfp::{rfp_forward, FusionMode, RfpHead};
use rfp_core::segnet::loss::{LabelVolume, DICE_EPS};
use rfp_core::segnet::params::{ConvUnit, Forward, ParamNodes, ParamStore};
use rfp_core::segnet::{forward_with_nodes, seg_loss, total_loss, NetworkConfig, SegNet};
use rfp_core::{NodeId, Result, Tape, Tensor};

use crate::error::{CliError, CliResult};

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Op, Scope::Module, Scope::Network];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::Network => "network",
        })
    }
}

impl FromStr for Scope {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| CliError::Config(format!("unknown gradcheck scope {s:?} (op|module|network)")))
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

pub struct Check {
    pub scope: Scope,
    pub name: &'static str,
    pub params: Vec<Tensor<f64>>,
    pub build: Build,
    pub max_entries: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// The micro network of the gradient suite.
pub fn micro_network_config() -> NetworkConfig {
    NetworkConfig {
        input_shape: [16, 16, 16],
        stage_channels: [4, 8, 8, 8, 8],
        num_classes: 3,
        edge_branch: true,
        esc_count: 4,
        dag_count: 4,
        ..NetworkConfig::default()
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(lo..hi)).unwrap()
    }

    fn labels(&mut self, k: usize, dims: [usize; 4]) -> Arc<LabelVolume> {
        let n = dims.iter().product();
        let v = (0..n).map(|_| self.0.random_range(0..k) as u8).collect();
        Arc::new(LabelVolume::new(k, dims, v).unwrap())
    }

    fn edges(&mut self, dims: &[usize]) -> Arc<EdgeMap> {
        let n: usize = dims.iter().product();
        let mut v: Vec<u8> = (0..n).map(|_| u8::from(self.0.random_bool(0.2))).collect();
        v[0] = 1;
        v[1] = 0;
        Arc::new(EdgeMap::new(dims, v).unwrap())
    }
}

/// `sum(y * r)` for a fixed random `r`, so every output entry gets its own
/// weight in the gradient.
fn project(t: &mut Tape<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let rl = t.leaf(r.clone());
    let m = t.mul(y, rl)?;
    t.sum(m)
}

fn op(name: &'static str, params: Vec<Tensor<f64>>, build: Build) -> Check {
    Check {
        scope: Scope::Op,
        name,
        params,
        build,
        max_entries: None,
    }
}

/// Output-weighted check of a single-output op `f`.
fn unary(
    g: &mut Gen,
    name: &'static str,
    params: Vec<Tensor<f64>>,
    out_shape: &[usize],
    f: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + 'static,
) -> Check {
    let r = g.tensor(out_shape, -1.0, 1.0);
    op(
        name,
        params,
        Box::new(move |t, p| {
            let y = f(t, p)?;
            project(t, y, &r)
        }),
    )
}

fn op_checks(g: &mut Gen) -> Vec<Check> {
    let s = [2, 3, 3, 2, 2];
    let mut v = Vec::new();
    let (a, b) = (g.tensor(&s, -1.0, 1.0), g.tensor(&s, -1.0, 1.0));
    v.push(unary(g, "add", vec![a.clone(), b.clone()], &s, |t, p| t.add(p[0], p[1])));
    v.push(unary(g, "mul", vec![a.clone(), b.clone()], &s, |t, p| t.mul(p[0], p[1])));
    v.push(unary(g, "scale", vec![a.clone()], &s, |t, p| t.scale(p[0], -1.75)));
    v.push(op("sum", vec![a.clone()], Box::new(|t, p| {
        let sq = t.mul(p[0], p[0])?;
        t.sum(sq)
    })));
    // keep entries away from the kink
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x });
    v.push(unary(g, "relu", vec![away], &s, |t, p| t.relu(p[0])));
    let wide = g.tensor(&s, -4.0, 4.0);
    v.push(unary(g, "sigmoid", vec![wide.clone()], &s, |t, p| t.sigmoid(p[0])));
    v.push(unary(g, "softmax_channels", vec![wide], &s, |t, p| t.softmax_channels(p[0])));

    let x = g.tensor(&[2, 2, 5, 4, 3], -1.0, 1.0);
    let k = g.tensor(&[3, 2, 3, 3, 3], -0.5, 0.5);
    let bias = g.tensor(&[3], -0.5, 0.5);
    v.push(unary(g, "conv3d", vec![x.clone(), k.clone(), bias.clone()], &[2, 3, 5, 4, 3], |t, p| {
        t.conv3d(p[0], p[1], Some(p[2]), [1; 3], [1; 3])
    }));
    v.push(unary(g, "conv3d_stride2", vec![x.clone(), k.clone(), bias], &[2, 3, 3, 2, 2], |t, p| {
        t.conv3d(p[0], p[1], Some(p[2]), [2; 3], [1; 3])
    }));
    let k1 = g.tensor(&[3, 2, 1, 1, 1], -0.5, 0.5);
    v.push(unary(g, "conv3d_pointwise", vec![x.clone(), k1], &[2, 3, 5, 4, 3], |t, p| {
        t.conv3d(p[0], p[1], None, [1; 3], [0; 3])
    }));

    let gamma = g.tensor(&[2], 0.5, 1.5);
    let beta = g.tensor(&[2], -0.5, 0.5);
    v.push(unary(g, "batch_norm_train", vec![x.clone(), gamma.clone(), beta.clone()], x.shape(), |t, p| {
        Ok(t.batch_norm(p[0], p[1], p[2], NormMode::Train, (&[0.0; 2], &[1.0; 2]), 1e-5)?.0)
    }));
    v.push(unary(g, "batch_norm_eval", vec![x.clone(), gamma, beta], x.shape(), |t, p| {
        Ok(t.batch_norm(p[0], p[1], p[2], NormMode::Eval, (&[0.1, -0.2], &[0.8, 1.3]), 1e-5)?.0)
    }));

    // distinct values so the window maxima are unique
    let mut pool_in = Tensor::from_fn(&[1, 2, 4, 4, 2], |i| i as f64 * 0.013).unwrap();
    {
        let d = pool_in.data_mut();
        for i in (1..d.len()).rev() {
            let j = g.0.random_range(0..=i);
            d.swap(i, j);
        }
    }
    v.push(unary(g, "maxpool3d", vec![pool_in], &[1, 2, 2, 2, 1], |t, p| t.maxpool3d(p[0], [2; 3], [2; 3])));
    let small = g.tensor(&[1, 2, 3, 2, 2], -1.0, 1.0);
    v.push(unary(g, "resize_up", vec![small.clone()], &[1, 2, 6, 5, 4], |t, p| t.resize(p[0], [6, 5, 4])));
    v.push(unary(g, "resize_down", vec![x.clone()], &[2, 2, 2, 3, 2], |t, p| t.resize(p[0], [2, 3, 2])));
    let y = g.tensor(&[2, 1, 5, 4, 3], -1.0, 1.0);
    v.push(unary(g, "concat_channels", vec![x.clone(), y], &[2, 3, 5, 4, 3], |t, p| t.concat_channels(&p[..2])));
    v.push(unary(g, "slice_channels", vec![x.clone()], &[2, 1, 5, 4, 3], |t, p| t.slice_channels(p[0], 1, 1)));
    v.push(unary(g, "slice_depth", vec![x.clone()], &[2, 2, 5, 4, 1], |t, p| t.slice_depth(p[0], 1)));
    let d0 = g.tensor(&[2, 2, 5, 4, 1], -1.0, 1.0);
    let d1 = g.tensor(&[2, 2, 5, 4, 1], -1.0, 1.0);
    v.push(unary(g, "stack_depth", vec![d0, d1], &[2, 2, 5, 4, 2], |t, p| t.stack_depth(&p[..2])));
    let m = g.tensor(&[4, 4], -1.0, 1.0);
    let vec4 = g.tensor(&[4], -1.0, 1.0);
    v.push(unary(g, "matvec", vec![m, vec4], &[4], |t, p| t.matvec(p[0], p[1])));

    for (name, nb) in [("dag_scan_four", Neighborhood::Four), ("dag_scan_eight", Neighborhood::Eight)] {
        let c = 3;
        let graph = build_ucg(4, 3, nb).unwrap();
        let layouts: Vec<_> = Direction::ALL.iter().map(|&d| Arc::new(induce_dag(&graph, d))).collect();
        let f = g.tensor(&[2, c, 4, 3, 1], -1.0, 1.0);
        let u = g.tensor(&[c, c], -0.6, 0.6);
        let w = g.tensor(&[c, c], -0.3, 0.3);
        let b = g.tensor(&[c], 0.05, 0.3);
        let r = g.tensor(&[2, c, 4, 3, 1], -1.0, 1.0);
        v.push(op(
            name,
            vec![f, u, w, b],
            Box::new(move |t, p| {
                let mut acc = None;
                for l in &layouts {
                    let (h, _) = t.dag_scan(p[0], p[1], p[2], p[3], l.clone())?;
                    acc = Some(match acc {
                        None => h,
                        Some(a) => t.add(a, h)?,
                    });
                }
                project(t, acc.unwrap(), &r)
            }),
        ));
    }

    let logits = g.tensor(&[2, 3, 3, 3, 2], -2.0, 2.0);
    let labels = g.labels(3, [2, 3, 3, 2]);
    let l2 = labels.clone();
    v.push(op("soft_dice", vec![logits.clone()], Box::new(move |t, p| {
        let pr = t.softmax_channels(p[0])?;
        t.soft_dice(pr, l2.clone(), DICE_EPS)
    })));
    v.push(op("cross_entropy", vec![logits], Box::new(move |t, p| {
        let pr = t.softmax_channels(p[0])?;
        t.cross_entropy(pr, labels.clone())
    })));
    let edge_logits = g.tensor(&[2, 1, 3, 3, 2], -3.0, 3.0);
    let edges = g.edges(&[2, 3, 3, 2]);
    v.push(op("weighted_bce", vec![edge_logits], Box::new(move |t, p| t.weighted_bce(p[0], edges.clone()))));
    v
}

/// Runs `body` with store parameters bound to the first `store.trainable`
/// ids; the remaining ids are extra inputs.
fn with_store<F>(store: ParamStore<f64>, body: F) -> Build
where
    F: Fn(&mut Forward<'_, f64>, &[NodeId]) -> Result<NodeId> + 'static,
{
    let n = store.trainable_indices().len();
    Box::new(move |t, p| {
        let nodes = ParamNodes::from_trainable(&store, &p[..n])?;
        let mut fw = Forward::new(t, &store, &nodes, NormMode::Train, 1e-5);
        body(&mut fw, &p[n..])
    })
}

fn trainables(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.trainable_indices().iter().map(|&i| store.get(i).value.clone()).collect()
}

fn module_checks(g: &mut Gen) -> CliResult<Vec<Check>> {
    let mut v = Vec::new();

    let mut store = ParamStore::new();
    let unit = ConvUnit::register(&mut store, &mut g.0, "unit", 2, 3, 3, 1)?;
    let mut params = trainables(&store);
    params.push(g.tensor(&[2, 2, 4, 4, 2], -1.0, 1.0));
    let r = g.tensor(&[2, 3, 4, 4, 2], -1.0, 1.0);
    v.push(Check {
        scope: Scope::Module,
        name: "conv_unit",
        params,
        build: with_store(store, move |fw, x| {
            let y = unit.forward(fw, x[0])?;
            project(fw.tape, y, &r)
        }),
        max_entries: None,
    });

    let mut store = ParamStore::new();
    let edge = EdgeSubnet::register(&mut store, &mut g.0, 3, 4)?;
    let mut params = trainables(&store);
    params.push(g.tensor(&[2, 3, 8, 8, 8], -1.0, 1.0));
    params.push(g.tensor(&[2, 4, 1, 1, 1], -1.0, 1.0));
    let edges = g.edges(&[2, 1, 16, 16, 16]);
    v.push(Check {
        scope: Scope::Module,
        name: "edge_subnet",
        params,
        build: with_store(store, move |fw, x| {
            let out = edge_subnet_forward(fw, &edge, x[0], x[1], [16, 16, 16])?;
            fw.tape.weighted_bce(out.logits, edges.clone())
        }),
        max_entries: Some(6),
    });

    for (name, fusion, nb) in [
        ("rfp_head_sum", FusionMode::Sum, Neighborhood::Four),
        ("rfp_head_concat", FusionMode::Concat, Neighborhood::Eight),
    ] {
        let mut store = ParamStore::new();
        let head = RfpHead::register(&mut store, &mut g.0, 3, [3, 3, 2], 2, &Direction::ALL, nb, fusion)?;
        let mut params = trainables(&store);
        params.push(g.tensor(&[2, 3, 3, 3, 2], -1.0, 1.0));
        let r1 = g.tensor(&[2, 2, 3, 3, 2], -1.0, 1.0);
        let r2 = g.tensor(&[2, 3, 3, 3, 2], -1.0, 1.0);
        v.push(Check {
            scope: Scope::Module,
            name,
            params,
            build: with_store(store, move |fw, x| {
                let out = rfp_forward(fw, &head, x[0])?;
                let a = project(fw.tape, out.logits, &r1)?;
                let b = project(fw.tape, out.enhanced, &r2)?;
                fw.tape.add(a, b)
            }),
            max_entries: Some(8),
        });
    }

    let labels = g.labels(3, [2, 4, 3, 2]);
    v.push(Check {
        scope: Scope::Module,
        name: "seg_loss",
        params: vec![g.tensor(&[2, 3, 4, 3, 2], -2.0, 2.0)],
        build: Box::new(move |t, p| seg_loss(t, p[0], &labels)),
        max_entries: None,
    });
    Ok(v)
}

fn network_check(g: &mut Gen, config: NetworkConfig, name: &'static str, max_entries: usize) -> CliResult<Check> {
    let net = SegNet::<f64>::new(config.clone(), 11)?;
    let [h, w, d] = config.input_shape;
    let images = g.tensor(&[2, 1, h, w, d], -1.0, 1.0);
    let labels = g.labels(config.num_classes, [2, h, w, d]);
    let edges = config.edge_branch.then(|| g.edges(&[2, 1, h, w, d]));
    let weights = config.loss_weights;
    Ok(Check {
        scope: Scope::Network,
        name,
        params: trainables(&net.store),
        build: Box::new(move |t, p| {
            let (out, _) = forward_with_nodes(&net, t, p, &images, NormMode::Train)?;
            Ok(total_loss(t, &out, &labels, edges.as_ref(), &weights)?.total)
        }),
        max_entries: Some(max_entries),
    })
}

/// Thin network whose deepest stage is a 2x2x1 grid, so the recurrent scan
/// has predecessors (the micro network's deepest stage is a single site).
pub fn grid_network_config() -> NetworkConfig {
    NetworkConfig {
        input_shape: [32, 32, 16],
        stage_channels: [2, 3, 3, 3, 3],
        ..micro_network_config()
    }
}

/// Every check of `scope`, built deterministically from `seed`.
pub fn checks(scope: Scope, seed: u64) -> CliResult<Vec<Check>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    Ok(match scope {
        Scope::Op => op_checks(&mut g),
        Scope::Module => module_checks(&mut g)?,
        Scope::Network => vec![
            network_check(&mut g, micro_network_config(), "micro_network", 3)?,
            network_check(&mut g, grid_network_config(), "grid_network", 2)?,
        ],
    })
}

pub fn run_check(check: &Check, mutation: Mutation, seed: u64) -> CliResult<CheckResult> {
    let opts = GradCheckOptions {
        step: STEP,
        max_entries: check.max_entries,
        seed,
        mutation,
    };
    let report = grad_check(&check.build, &check.params, TOLERANCE, &opts)?;
    Ok(CheckResult {
        scope: check.scope,
        name: check.name,
        report,
    })
}

/// Runs every check of `scope` whose name contains `filter`.
pub fn run_scope(scope: Scope, filter: Option<&str>, mutation: Mutation, seed: u64) -> CliResult<Vec<CheckResult>> {
    checks(scope, seed)?
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_check(c, mutation, seed))
        .collect()
}
