use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::autodiff::{grad_check, GradCheckOptions, NormMode};
use rfp_core::graph::{build_ucg, induce_dag, Direction, Neighborhood};
use rfp_core::tensor::{conv3d, maxpool3d, relu, softmax_channels};
use rfp_core::{NodeId, Result, Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// Direct summation over output sites, channels and kernel taps.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Vec<f64> {
    let s = x.shape();
    let ks = k.shape();
    let (n, ci, inp) = (s[0], s[1], [s[2], s[3], s[4]]);
    let (co, kern) = (ks[0], [ks[2], ks[3], ks[4]]);
    let out: Vec<usize> = (0..3).map(|a| (inp[a] + 2 * pad[a] - kern[a]) / stride[a] + 1).collect();
    let mut y = Vec::new();
    for bn in 0..n {
        for o in 0..co {
            for i in 0..out[0] {
                for j in 0..out[1] {
                    for l in 0..out[2] {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for p in 0..kern[0] {
                                for q in 0..kern[1] {
                                    for r in 0..kern[2] {
                                        let src = [
                                            (i * stride[0] + p) as i64 - pad[0] as i64,
                                            (j * stride[1] + q) as i64 - pad[1] as i64,
                                            (l * stride[2] + r) as i64 - pad[2] as i64,
                                        ];
                                        if (0..3).any(|a| src[a] < 0 || src[a] >= inp[a] as i64) {
                                            continue;
                                        }
                                        let xi = (((bn * ci + c) * inp[0] + src[0] as usize) * inp[1] + src[1] as usize)
                                            * inp[2]
                                            + src[2] as usize;
                                        let ki = (((o * ci + c) * kern[0] + p) * kern[1] + q) * kern[2] + r;
                                        acc += x.data()[xi] * k.data()[ki];
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let y = conv3d(&x, &k, Some(&b), [1; 3], [1; 3]).unwrap();
    for (a, o) in y.data().iter().zip(conv_oracle(&x, &k, b.data(), [1; 3], [1; 3])) {
        assert!((a - o).abs() < 1e-5);
    }
    for trial in 0..20 {
        let kern = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
        let pad = [rng.random_range(0..=1), rng.random_range(0..=1), rng.random_range(0..=1)];
        let inp: Vec<usize> = (0..3).map(|a| rng.random_range(kern[a].max(2)..=7)).collect();
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
        let x = rand_tensor(&mut rng, &[n, ci, inp[0], inp[1], inp[2]], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[co, ci, kern[0], kern[1], kern[2]], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[co], -1.0, 1.0);
        let y = conv3d(&x, &k, Some(&b), stride, pad).unwrap();
        let oracle = conv_oracle(&x, &k, b.data(), stride, pad);
        assert_eq!(y.len(), oracle.len(), "trial {trial}");
        for (a, o) in y.data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-5, "trial {trial}");
        }
        // f32 path agrees with the f64 oracle as well
        let y32 = conv3d(&x.cast::<f32>(), &k.cast::<f32>(), Some(&b.cast::<f32>()), stride, pad).unwrap();
        for (a, o) in y32.data().iter().zip(&oracle) {
            assert!((*a as f64 - o).abs() < 1e-4, "trial {trial} f32");
        }
    }
}

#[test]
fn conv_fixtures_and_errors() {
    let ones = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
    let two = Tensor::full(&[1, 1, 1, 1, 1], 2.0).unwrap();
    let y = conv3d(&ones, &two, None, [1; 3], [0; 3]).unwrap();
    assert!(y.data().iter().all(|&v| v == 2.0));

    let mut delta = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]).unwrap();
    delta.data_mut()[13] = 1.0;
    let y = conv3d(&delta, &Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap(), None, [1; 3], [1; 3]).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.0));
    assert_eq!(y.sum(), 27.0);

    let k2 = Tensor::<f64>::zeros(&[1, 2, 3, 3, 3]).unwrap();
    let err = conv3d(&ones, &k2, None, [1; 3], [1; 3]).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let big = Tensor::<f64>::zeros(&[1, 1, 5, 1, 1]).unwrap();
    assert!(conv3d(&ones, &big, None, [1; 3], [0; 3]).is_err());
    assert!(conv3d(&ones, &two, None, [0, 1, 1], [0; 3]).is_err());
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

/// Weighted sum `sum(y * r)` so that every output entry carries gradient.
fn project(t: &mut Tape<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let w = t.leaf(r.clone());
    let m = t.mul(y, w)?;
    t.sum(m)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let s = [2, 3, 4, 3, 2];
    let r = rand_tensor(rng, &s, -1.0, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let rr = r.clone();
    cases.push((
        "add_mul",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |t, p| {
            let a = t.add(p[0], p[1])?;
            let m = t.mul(a, p[0])?;
            project(t, m, &rr)
        }),
    ));
    let rr = r.clone();
    cases.push((
        "relu_sigmoid",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |t, p| {
            let a = t.relu(p[0])?;
            let b = t.sigmoid(p[0])?;
            let c = t.add(a, b)?;
            project(t, c, &rr)
        }),
    ));
    let rr = r.clone();
    cases.push((
        "softmax",
        vec![rand_tensor(rng, &s, -2.0, 2.0)],
        Box::new(move |t, p| {
            let a = t.softmax_channels(p[0])?;
            project(t, a, &rr)
        }),
    ));
    let rc = rand_tensor(rng, &[2, 2, 2, 2, 1], -1.0, 1.0);
    cases.push((
        "conv3d_stride2",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[2, 3, 3, 3, 3], -0.5, 0.5), rand_tensor(rng, &[2], -0.5, 0.5)],
        Box::new(move |t, p| {
            let y = t.conv3d(p[0], p[1], Some(p[2]), [2; 3], [1; 3])?;
            project(t, y, &rc)
        }),
    ));
    let rr = r.clone();
    cases.push((
        "batch_norm_train",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[3], 0.5, 1.5), rand_tensor(rng, &[3], -0.5, 0.5)],
        Box::new(move |t, p| {
            let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
            let (y, _) = t.batch_norm(p[0], p[1], p[2], NormMode::Train, (&mean, &var), 1e-5)?;
            project(t, y, &rr)
        }),
    ));
    let rp = rand_tensor(rng, &[2, 3, 2, 1, 1], -1.0, 1.0);
    cases.push((
        "maxpool3d",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |t, p| {
            let y = t.maxpool3d(p[0], [2; 3], [2; 3])?;
            project(t, y, &rp)
        }),
    ));
    let rz = rand_tensor(rng, &[2, 3, 7, 5, 3], -1.0, 1.0);
    cases.push((
        "resize",
        vec![rand_tensor(rng, &s, -1.0, 1.0)],
        Box::new(move |t, p| {
            let y = t.resize(p[0], [7, 5, 3])?;
            project(t, y, &rz)
        }),
    ));
    let rs = rand_tensor(rng, &[2, 4, 4, 3, 2], -1.0, 1.0);
    cases.push((
        "concat_slice_stack",
        vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &[2, 1, 4, 3, 2], -1.0, 1.0)],
        Box::new(move |t, p| {
            let cat = t.concat_channels(&[p[0], p[1]])?;
            let tail = t.slice_channels(cat, 1, 2)?;
            let d0 = t.slice_depth(cat, 0)?;
            let d1 = t.slice_depth(cat, 1)?;
            let st = t.stack_depth(&[d1, d0])?;
            let a = project(t, st, &rs)?;
            let b = t.sum(tail)?;
            t.add(a, b)
        }),
    ));
    let rv = rand_tensor(rng, &[5], -1.0, 1.0);
    cases.push((
        "matvec",
        vec![rand_tensor(rng, &[5, 5], -1.0, 1.0), rand_tensor(rng, &[5], -1.0, 1.0)],
        Box::new(move |t, p| {
            let y = t.matvec(p[0], p[1])?;
            project(t, y, &rv)
        }),
    ));
    let layout = Arc::new(induce_dag(&build_ucg(4, 5, Neighborhood::Eight).unwrap(), Direction::UpRight));
    let rd = rand_tensor(rng, &[1, 3, 4, 5, 1], -1.0, 1.0);
    cases.push((
        "dag_scan",
        vec![
            rand_tensor(rng, &[1, 3, 4, 5, 1], -1.0, 1.0),
            rand_tensor(rng, &[3, 3], -0.6, 0.6),
            rand_tensor(rng, &[3, 3], -0.3, 0.3),
            rand_tensor(rng, &[3], -0.2, 0.2),
        ],
        Box::new(move |t, p| {
            let (h, _) = t.dag_scan(p[0], p[1], p[2], p[3], layout.clone())?;
            project(t, h, &rd)
        }),
    ));
    cases
}

#[test]
fn every_op_passes_finite_differences_on_five_instances() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for (name, params, build) in op_cases(&mut rng) {
            let opts = GradCheckOptions {
                step: 1e-5,
                seed,
                ..GradCheckOptions::default()
            };
            let rep = grad_check(|t, p| build(t, p), &params, 1e-3, &opts).unwrap();
            assert!(rep.passed(), "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_fn(&[2, 3], |i| -1.0 - i as f64).unwrap());
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    let r = t.relu(x).unwrap();
    let s2 = t.sum(r).unwrap();
    let g = t.backward(s2).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    assert!(t.backward(r).is_err());
}

#[test]
fn tape_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: Vec<Tensor<f64>> = op_cases(&mut rng).into_iter().flat_map(|c| c.1).collect();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        op_cases(&mut rng)
            .into_iter()
            .map(|(_, p, build)| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|v| t.leaf(v.clone())).collect();
                let root = build(&mut t, &ids).unwrap();
                let g = t.backward(root).unwrap();
                (t.value(root).data()[0], ids.iter().map(|&i| g.get(i)).collect::<Vec<_>>())
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert!(!params.is_empty());
    for ((la, ga), (lb, gb)) in a.iter().zip(&b) {
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), k in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, k, 3, 2, 2], -scale, scale);
        let y = softmax_channels(&x).unwrap();
        for n in 0..2 {
            for v in 0..12 {
                let s: f64 = (0..k).map(|c| y.data()[(n * k + c) * 12 + v]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relu_is_nonnegative(values in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let n = values.len();
        let y = relu(&Tensor::new(&[n], values.clone()).unwrap());
        prop_assert!(y.data().iter().zip(&values).all(|(&o, &i)| o >= 0.0 && (o == i || o == 0.0)));
    }

    #[test]
    fn maxpool_equals_window_max(seed in any::<u64>(), win in 1usize..4, stride in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [1, 2, 7, 6, 5];
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let y = maxpool3d(&x, [win; 3], [stride; 3]).unwrap().output;
        let out: Vec<usize> = (2..5).map(|a| (s[a] - win) / stride + 1).collect();
        prop_assert_eq!(y.shape(), &[1, 2, out[0], out[1], out[2]]);
        let mut it = y.data().iter();
        for c in 0..2 {
            for i in 0..out[0] {
                for j in 0..out[1] {
                    for l in 0..out[2] {
                        let mut best = f64::NEG_INFINITY;
                        for p in 0..win {
                            for q in 0..win {
                                for r in 0..win {
                                    let idx = ((c * 7 + i * stride + p) * 6 + j * stride + q) * 5 + l * stride + r;
                                    best = best.max(x.data()[idx]);
                                }
                            }
                        }
                        prop_assert_eq!(*it.next().unwrap(), best);
                    }
                }
            }
        }
    }
}
