use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::graph::{
    build_ucg, dag_scan_backward, dag_scan_forward, fuse_directions, induce_dag, DagLayout, Direction, GridGraph,
    Neighborhood, RfpWeights,
};
use rfp_core::Tensor;

const NEIGHBORHOODS: [Neighborhood; 2] = [Neighborhood::Four, Neighborhood::Eight];

fn offsets(n: Neighborhood) -> &'static [(i64, i64)] {
    match n {
        Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Neighborhood::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    }
}

/// Position of `(r, c)` in the sweep of `dir`, as a lexicographic key.
fn sweep_key(dir: Direction, r: usize, c: usize) -> (i64, i64) {
    let (r, c) = (r as i64, c as i64);
    match dir {
        Direction::DownRight => (r, c),
        Direction::DownLeft => (r, -c),
        Direction::UpRight => (-r, c),
        Direction::UpLeft => (-r, -c),
    }
}

/// Neighbours of `(r, c)` that the sweep of `dir` visits earlier.
fn geometric_predecessors(h: usize, w: usize, n: Neighborhood, dir: Direction, r: usize, c: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &(dr, dc) in offsets(n) {
        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
            continue;
        }
        let (rr, cc) = (rr as usize, cc as usize);
        if sweep_key(dir, rr, cc) < sweep_key(dir, r, c) {
            out.push(rr * w + cc);
        }
    }
    out.sort_unstable();
    out
}

fn enumerate_edges(h: usize, w: usize, n: Neighborhood) -> BTreeSet<(u32, u32)> {
    let mut set = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            for &(dr, dc) in offsets(n) {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let a = (r * w + c) as u32;
                let b = (rr as usize * w + cc as usize) as u32;
                set.insert((a.min(b), a.max(b)));
            }
        }
    }
    set
}

#[test]
fn ucg_edge_counts_small_grids() {
    assert_eq!(build_ucg(1, 1, Neighborhood::Four).unwrap().edges.len(), 0);
    assert_eq!(build_ucg(1, 1, Neighborhood::Eight).unwrap().edges.len(), 0);
    assert_eq!(build_ucg(2, 2, Neighborhood::Four).unwrap().edges.len(), 4);
    assert_eq!(build_ucg(2, 2, Neighborhood::Eight).unwrap().edges.len(), 6);
    assert_eq!(build_ucg(3, 4, Neighborhood::Four).unwrap().edges.len(), 17);
    assert!(build_ucg(0, 3, Neighborhood::Four).is_err());
}

#[test]
fn topology_exhaustive_up_to_32() {
    for n in NEIGHBORHOODS {
        for h in 1..=32 {
            for w in 1..=32 {
                let g = build_ucg(h, w, n).unwrap();
                let expected = enumerate_edges(h, w, n);
                let got: BTreeSet<(u32, u32)> = g.edges.iter().copied().collect();
                assert_eq!(got.len(), g.edges.len(), "duplicate edges {h}x{w} {n}");
                assert_eq!(got, expected, "edge set {h}x{w} {n}");
                assert_eq!(g.edges.len(), GridGraph::expected_edge_count(h, w, n));

                let mut undirected = BTreeSet::new();
                let mut directed_cover: BTreeMap<(u32, u32), usize> = BTreeMap::new();
                for dir in Direction::ALL {
                    let dag = induce_dag(&g, dir);
                    assert!(dag.is_topologically_ordered(), "{h}x{w} {n} {dir:?}");
                    let edges = dag.directed_edges();
                    assert_eq!(edges.len(), g.edges.len());
                    for (a, b) in edges {
                        assert!(expected.contains(&(a.min(b), a.max(b))));
                        undirected.insert((a.min(b), a.max(b)));
                        *directed_cover.entry((a, b)).or_default() += 1;
                    }
                }
                assert_eq!(undirected, expected, "union {h}x{w} {n}");
                for (a, b) in &expected {
                    assert_eq!(directed_cover.get(&(*a, *b)).copied().unwrap_or(0), 2);
                    assert_eq!(directed_cover.get(&(*b, *a)).copied().unwrap_or(0), 2);
                }
            }
        }
    }
}

#[test]
fn predecessors_match_sweep_geometry() {
    for n in NEIGHBORHOODS {
        for (h, w) in [(1, 1), (1, 7), (5, 1), (4, 6), (9, 9)] {
            let g = build_ucg(h, w, n).unwrap();
            for dir in Direction::ALL {
                let dag = induce_dag(&g, dir);
                for r in 0..h {
                    for c in 0..w {
                        let mut got = dag.predecessors[r * w + c].iter().map(|&v| v as usize).collect::<Vec<_>>();
                        got.sort_unstable();
                        assert_eq!(got, geometric_predecessors(h, w, n, dir, r, c));
                    }
                }
            }
        }
    }
}

#[test]
fn scan_origins_and_interior_predecessors() {
    let g4 = build_ucg(5, 5, Neighborhood::Four).unwrap();
    let dr = induce_dag(&g4, Direction::DownRight);
    let ul = induce_dag(&g4, Direction::UpLeft);
    assert!(dr.predecessors[0].is_empty());
    assert!(ul.predecessors[24].is_empty());
    let centre = 2 * 5 + 2;
    let mut p = dr.predecessors[centre].clone();
    p.sort_unstable();
    assert_eq!(p, vec![(5 + 2) as u32, (2 * 5 + 1) as u32]);

    let g8 = build_ucg(5, 5, Neighborhood::Eight).unwrap();
    let mut p = induce_dag(&g8, Direction::DownRight).predecessors[centre].clone();
    p.sort_unstable();
    assert_eq!(p, vec![6, 7, 8, 11]);
}

/// Literal evaluation of the recurrence from geometric predecessor sets, in
/// sweep order, with explicit per-entry loops.
fn interpreter(
    f: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    n: Neighborhood,
    dir: Direction,
    u: &[f64],
    wm: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut cells: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    cells.sort_by_key(|&(r, c)| sweep_key(dir, r, c));
    let mut hid = vec![0.0; h * w * ch];
    for (r, c) in cells {
        let v = r * w + c;
        let mut hhat = vec![0.0; ch];
        for p in geometric_predecessors(h, w, n, dir, r, c) {
            for k in 0..ch {
                hhat[k] += hid[p * ch + k];
            }
        }
        for i in 0..ch {
            let mut z = b[i];
            for j in 0..ch {
                z += u[i * ch + j] * f[v * ch + j] + wm[i * ch + j] * hhat[j];
            }
            hid[v * ch + i] = z.max(0.0);
        }
    }
    hid
}

fn random_weights(rng: &mut ChaCha8Rng, c: usize, scale: f64) -> RfpWeights<f64> {
    let mut m = |len: usize, s: f64| Tensor::from_fn(&[len], |_| rng.random_range(-s..s)).unwrap();
    let u = m(c * c, scale).reshape(&[c, c]).unwrap();
    let w = m(c * c, scale * 0.5).reshape(&[c, c]).unwrap();
    let b = m(c, 0.2);
    RfpWeights::new(u, w, b).unwrap()
}

#[test]
fn unit_weight_two_by_two_trace() {
    let g = build_ucg(2, 2, Neighborhood::Four).unwrap();
    let dag = induce_dag(&g, Direction::DownRight);
    let one = |s: &[usize]| Tensor::full(s, 1.0f64).unwrap();
    let weights = RfpWeights::new(one(&[1, 1]), one(&[1, 1]), Tensor::zeros(&[1]).unwrap()).unwrap();
    let (hid, stats) = dag_scan_forward(&one(&[2, 2, 1]), &dag, &weights).unwrap();
    assert_eq!(hid.data(), &[1.0, 2.0, 2.0, 5.0]);
    assert_eq!(stats.cell_updates, 4);
}

#[test]
fn random_grids_match_interpreter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let h = rng.random_range(1..=7);
        let w = rng.random_range(1..=7);
        let c = rng.random_range(1..=4);
        let n = NEIGHBORHOODS[trial % 2];
        let dir = Direction::ALL[trial % 4];
        let weights = random_weights(&mut rng, c, 0.8);
        let f = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)).unwrap();
        let dag = induce_dag(&build_ucg(h, w, n).unwrap(), dir);
        let (hid, stats) = dag_scan_forward(&f, &dag, &weights).unwrap();
        let oracle = interpreter(
            f.data(),
            h,
            w,
            c,
            n,
            dir,
            weights.u.data(),
            weights.w.data(),
            weights.b.data(),
        );
        for (a, b) in hid.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
        }
        assert_eq!(stats.cell_updates, (h * w) as u64);
    }
}

fn rotate_180(x: &Tensor<f64>) -> Tensor<f64> {
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    Tensor::from_fn(&[h, w, c], |i| {
        let (r, rest) = (i / (w * c), i % (w * c));
        let (col, k) = (rest / c, rest % c);
        x.data()[((h - 1 - r) * w + (w - 1 - col)) * c + k]
    })
    .unwrap()
}

#[test]
fn direction_symmetry_under_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in NEIGHBORHOODS {
        for (h, w, c) in [(3, 5, 2), (6, 4, 3), (1, 6, 1)] {
            let g = build_ucg(h, w, n).unwrap();
            let weights = random_weights(&mut rng, c, 0.9);
            let f = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)).unwrap();
            let (ul, _) = dag_scan_forward(&f, &induce_dag(&g, Direction::UpLeft), &weights).unwrap();
            let (dr, _) = dag_scan_forward(&rotate_180(&f), &induce_dag(&g, Direction::DownRight), &weights).unwrap();
            assert_eq!(dr, rotate_180(&ul));
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, c) = (4, 5, 3);
    for n in NEIGHBORHOODS {
        let dag = induce_dag(&build_ucg(h, w, n).unwrap(), Direction::DownLeft);
        let weights = random_weights(&mut rng, c, 0.7);
        let f = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)).unwrap();
        let g = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)).unwrap();
        let loss = |f: &Tensor<f64>, wt: &RfpWeights<f64>| -> f64 {
            let (hid, _) = dag_scan_forward(f, &dag, wt).unwrap();
            hid.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (hid, _) = dag_scan_forward(&f, &dag, &weights).unwrap();
        let grads = dag_scan_backward(&f, &dag, &weights, &hid, &g, false).unwrap();
        let step = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-3, "analytic {analytic} numeric {numeric}");
        };
        for i in 0..f.len() {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.data_mut()[i] += step;
            m.data_mut()[i] -= step;
            check(grads.features.data()[i], loss(&p, &weights), loss(&m, &weights));
        }
        for which in 0..3 {
            let len = if which == 2 { c } else { c * c };
            for i in 0..len {
                let (mut p, mut m) = (weights.clone(), weights.clone());
                let (tp, tm, an) = match which {
                    0 => (&mut p.u, &mut m.u, grads.u.data()[i]),
                    1 => (&mut p.w, &mut m.w, grads.w.data()[i]),
                    _ => (&mut p.b, &mut m.b, grads.b.data()[i]),
                };
                tp.data_mut()[i] += step;
                tm.data_mut()[i] -= step;
                check(an, loss(&f, &p), loss(&f, &m));
            }
        }
    }
}

#[test]
fn fusion_is_elementwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let maps: Vec<Tensor<f64>> = (0..4)
        .map(|_| Tensor::from_fn(&[3, 4, 2], |_| rng.random_range(-1.0..1.0)).unwrap())
        .collect();
    let fused = fuse_directions(&maps).unwrap();
    for i in 0..fused.len() {
        let oracle = maps[0].data()[i] + maps[1].data()[i] + maps[2].data()[i] + maps[3].data()[i];
        assert!((fused.data()[i] - oracle).abs() < 1e-12);
    }
    let m = maps[0].clone();
    let z = Tensor::zeros_like(&m);
    assert_eq!(fuse_directions(&[z.clone(), m.clone(), z.clone(), z]).unwrap(), m);
    let same = fuse_directions(&[m.clone(), m.clone(), m.clone(), m.clone()]).unwrap();
    assert_eq!(same, m.map(|v| 4.0 * v));
    let other = Tensor::<f64>::zeros(&[3, 4, 1]).unwrap();
    assert!(fuse_directions(&[m, other]).is_err());
}

fn layout_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..9, 1usize..9, 1usize..4, 0usize..2, 0usize..4)
}

fn layout(h: usize, w: usize, n: usize, d: usize) -> DagLayout {
    induce_dag(&build_ucg(h, w, NEIGHBORHOODS[n]).unwrap(), Direction::ALL[d])
}

proptest! {
    #[test]
    fn zero_features_and_bias_propagate_zero((h, w, c, n, d) in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = random_weights(&mut rng, c, 2.0);
        weights.b = Tensor::zeros(&[c]).unwrap();
        let (hid, _) = dag_scan_forward(&Tensor::zeros(&[h, w, c]).unwrap(), &layout(h, w, n, d), &weights).unwrap();
        prop_assert!(hid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_scan_updates_every_cell_once((h, w, c, n, d) in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = random_weights(&mut rng, c, 1.0);
        let f = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0)).unwrap();
        let dag = layout(h, w, n, d);
        let (hid, stats) = dag_scan_forward(&f, &dag, &weights).unwrap();
        prop_assert_eq!(stats.cell_updates, (h * w) as u64);
        prop_assert_eq!(stats.predecessor_visits, dag.predecessor_visits());
        prop_assert!(hid.data().iter().all(|&v| v >= 0.0));
    }
}
