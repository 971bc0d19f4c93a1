use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::data::{
    apply_augment, flip, gen_synthetic, preprocess, rotate_depth_axis_nearest, structures_touch, AugmentParams,
    SyntheticSpec, BACKGROUND_INTENSITY, CLIP_HI, CLIP_LO,
};
use rfp_core::metrics::{assd, dsc, hd95, surface_distances};

type Shape = [usize; 3];

fn idx(s: Shape, p: [usize; 3]) -> usize {
    (p[0] * s[1] + p[1]) * s[2] + p[2]
}

fn brute_surface(mask: &[bool], s: Shape) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for r in 0..s[0] {
        for c in 0..s[1] {
            for z in 0..s[2] {
                let p = [r, c, z];
                if !mask[idx(s, p)] {
                    continue;
                }
                let mut exposed = false;
                for (a, delta) in [(0, -1i64), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
                    let q = p[a] as i64 + delta;
                    if q < 0 || q >= s[a] as i64 {
                        exposed = true;
                    } else {
                        let mut n = p;
                        n[a] = q as usize;
                        exposed |= !mask[idx(s, n)];
                    }
                }
                if exposed {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Exhaustive nearest-surface distances, `a` to `b` then `b` to `a`.
fn brute_distances(a: &[bool], b: &[bool], s: Shape, sp: [f64; 3]) -> Option<Vec<f64>> {
    let (sa, sb) = (brute_surface(a, s), brute_surface(b, s));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter()
            .map(|q| {
                let t = |ax: usize| (p[ax] as f64 - q[ax] as f64) * sp[ax];
                let (th, tw, tz) = (t(0), t(1), t(2));
                ((tz * tz + tw * tw) + th * th).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut out: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    out.extend(sb.iter().map(|p| nearest(p, &sa)));
    Some(out)
}

fn brute_dsc(a: &[u8], b: &[u8], k: u8) -> Option<f64> {
    let na = a.iter().filter(|&&v| v == k).count();
    let nb = b.iter().filter(|&&v| v == k).count();
    let both = a.iter().zip(b).filter(|(&x, &y)| x == k && y == k).count();
    (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64)
}

fn random_mask(rng: &mut ChaCha8Rng, s: Shape) -> Vec<u8> {
    // a few random boxes give surfaces with structure instead of salt noise
    let mut m = vec![0u8; s.iter().product()];
    for _ in 0..rng.random_range(0..4) {
        let lo: Vec<usize> = (0..3).map(|a| rng.random_range(0..s[a])).collect();
        let hi: Vec<usize> = (0..3).map(|a| rng.random_range(lo[a]..s[a]) + 1).collect();
        for r in lo[0]..hi[0] {
            for c in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    m[idx(s, [r, c, z])] = 1;
                }
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(0.03) {
            *v ^= 1;
        }
    }
    m
}

#[test]
fn random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..50 {
        let s = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
        let sp = if trial % 2 == 0 { [1.0, 1.0, 1.0] } else { [0.8, 1.25, 2.5] };
        let a = random_mask(&mut rng, s);
        let b = random_mask(&mut rng, s);
        assert_eq!(dsc(&a, &b, 1).unwrap(), brute_dsc(&a, &b, 1), "trial {trial}");
        let (ma, mb): (Vec<bool>, Vec<bool>) = (a.iter().map(|&v| v == 1).collect(), b.iter().map(|&v| v == 1).collect());
        let got = surface_distances(&ma, &mb, s, sp).unwrap();
        let oracle = brute_distances(&ma, &mb, s, sp);
        assert_eq!(got, oracle, "trial {trial} shape {s:?}");
        if let Some(d) = got {
            assert_eq!(assd(&d), Some(d.iter().sum::<f64>() / d.len() as f64));
        }
    }
}

#[test]
fn shifted_cube_and_point_fixtures() {
    let s = [6, 6, 6];
    let mut a = vec![0u8; 216];
    let mut b = vec![0u8; 216];
    for r in 1..3 {
        for c in 1..3 {
            for z in 1..3 {
                a[idx(s, [r, c, z])] = 1;
                b[idx(s, [r + 1, c, z])] = 1;
            }
        }
    }
    assert_eq!(dsc(&a, &b, 1).unwrap(), Some(0.5));

    let mut p = vec![false; 216];
    let mut q = vec![false; 216];
    p[idx(s, [1, 1, 1])] = true;
    q[idx(s, [1, 4, 1])] = true;
    let d = surface_distances(&p, &q, s, [1.0; 3]).unwrap().unwrap();
    assert_eq!(d, vec![3.0, 3.0]);
    assert_eq!(assd(&d), Some(3.0));
    assert_eq!(hd95(&d), Some(3.0));
}

#[test]
fn empty_mask_is_missing_not_zero() {
    let s = [4, 4, 4];
    let empty = vec![false; 64];
    let mut one = vec![false; 64];
    one[5] = true;
    assert_eq!(surface_distances(&empty, &one, s, [1.0; 3]).unwrap(), None);
    assert_eq!(dsc(&[0; 64], &[0; 64], 1).unwrap(), None);
    assert_eq!(assd(&[]), None);
}

#[test]
fn identical_masks_have_zero_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m: Vec<bool> = random_mask(&mut rng, [8, 9, 7]).iter().map(|&v| v == 1).collect();
    let d = surface_distances(&m, &m, [8, 9, 7], [1.0, 2.0, 3.0]).unwrap().unwrap();
    assert!(d.iter().all(|&v| v == 0.0));
    assert_eq!(hd95(&d), Some(0.0));
}

#[test]
fn hd95_interpolates_order_statistics() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(assd(&v), Some(50.5));
    assert!((hd95(&v).unwrap() - 95.05).abs() < 1e-9);
    assert_eq!(hd95(&[4.5]), Some(4.5));
}

fn shift(m: &[u8], s: Shape, by: [usize; 3]) -> Vec<u8> {
    let mut out = vec![0u8; m.len()];
    for r in 0..s[0] - by[0] {
        for c in 0..s[1] - by[1] {
            for z in 0..s[2] - by[2] {
                out[idx(s, [r + by[0], c + by[1], z + by[2]])] = m[idx(s, [r, c, z])];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [rng.random_range(1..=10), rng.random_range(1..=10), rng.random_range(1..=10)];
        let a = random_mask(&mut rng, s);
        let b = random_mask(&mut rng, s);
        prop_assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        let (ma, mb): (Vec<bool>, Vec<bool>) = (a.iter().map(|&v| v == 1).collect(), b.iter().map(|&v| v == 1).collect());
        let ab = surface_distances(&ma, &mb, s, [1.0, 1.5, 2.0]).unwrap();
        let ba = surface_distances(&mb, &ma, s, [1.0, 1.5, 2.0]).unwrap();
        if let (Some(mut x), Some(mut y)) = (ab.clone(), ba.clone()) {
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(hd95(&x), hd95(&y));
        } else {
            prop_assert!(ab.is_none() && ba.is_none());
        }
    }

    #[test]
    fn metrics_are_translation_invariant(seed in any::<u64>(), by in prop::array::uniform3(0usize..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [12, 12, 12];
        let inner = [12 - 4, 12 - 4, 12 - 4];
        let place = |m: &[u8]| {
            let mut out = vec![0u8; 1728];
            for r in 0..inner[0] {
                for c in 0..inner[1] {
                    for z in 0..inner[2] {
                        out[idx(s, [r + 1, c + 1, z + 1])] = m[idx(inner, [r, c, z])];
                    }
                }
            }
            out
        };
        let a = place(&random_mask(&mut rng, inner));
        let b = place(&random_mask(&mut rng, inner));
        let (sa, sb) = (shift(&a, s, by), shift(&b, s, by));
        prop_assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&sa, &sb, 1).unwrap());
        let bools = |m: &[u8]| m.iter().map(|&v| v == 1).collect::<Vec<bool>>();
        let mut d0 = surface_distances(&bools(&a), &bools(&b), s, [1.0; 3]).unwrap();
        let mut d1 = surface_distances(&bools(&sa), &bools(&sb), s, [1.0; 3]).unwrap();
        for d in [&mut d0, &mut d1].into_iter().flatten() {
            d.sort_by(f64::total_cmp);
        }
        prop_assert_eq!(d0, d1);
    }

    #[test]
    fn preprocess_is_bounded(values in prop::collection::vec(-2000.0f32..2000.0, 2..300)) {
        let out = preprocess(&values, CLIP_LO, CLIP_HI);
        let n = out.len() as f64;
        // a z-scored sample of n values lies within sqrt(n - 1) of the mean
        let bound = (n - 1.0).sqrt() + 1e-3;
        prop_assert!(out.iter().all(|&v| (v as f64).abs() <= bound));
    }
}

#[test]
fn preprocess_hand_values() {
    assert!(preprocess(&[300.0; 10], CLIP_LO, CLIP_HI).iter().all(|&v| v == 0.0));

    let ramp: Vec<f32> = (0..=800).map(|i| i as f32 - 400.0).collect();
    let out = preprocess(&ramp, CLIP_LO, CLIP_HI);
    let clipped: Vec<f64> = ramp.iter().map(|&v| (v as f64).clamp(-250.0, 200.0)).collect();
    let mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
    let sd = (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / clipped.len() as f64).sqrt();
    for i in [0, 100, 400, 650, 800] {
        let expect = (clipped[i] - mean) / sd;
        assert!((out[i] as f64 - expect).abs() < 1e-5, "voxel {i}");
    }
    let m = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
    let var = out.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / out.len() as f64;
    assert!(m.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu = raw.iter().sum::<f64>() / 1000.0;
    let s = (raw.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 1000.0).sqrt();
    let standard: Vec<f32> = raw.iter().map(|v| ((v - mu) / s) as f32).collect();
    let again = preprocess(&standard, CLIP_LO, CLIP_HI);
    for (a, b) in standard.iter().zip(&again) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn histogram(labels: &[u8]) -> [usize; 256] {
    let mut h = [0; 256];
    for &l in labels {
        h[l as usize] += 1;
    }
    h
}

#[test]
fn augmentation_identities() {
    let spec = SyntheticSpec::default();
    let sample = &gen_synthetic(&spec, 1).unwrap()[0];
    assert_eq!(&apply_augment(sample, &AugmentParams::IDENTITY).unwrap(), sample);
    for axis in 0..3 {
        let mut l = sample.labels.clone();
        flip(&mut l, sample.shape, axis);
        assert_ne!(l, sample.labels);
        flip(&mut l, sample.shape, axis);
        assert_eq!(l, sample.labels);
    }
    for angle in [90.0, -90.0, 180.0] {
        let rotated = rotate_depth_axis_nearest(&sample.labels, sample.shape, angle);
        assert_eq!(histogram(&rotated), histogram(&sample.labels), "angle {angle}");
    }
    let p = AugmentParams {
        flips: [true, false, true],
        angle_deg: 12.0,
    };
    let mut with_edges = sample.clone();
    with_edges.edges = Some(sample.labels.iter().map(|&l| (l == 1) as u8).collect());
    let out = apply_augment(&with_edges, &p).unwrap();
    // edges follow labels through the same nearest-neighbour map
    let expect: Vec<u8> = out.labels.iter().map(|&l| (l == 1) as u8).collect();
    assert_eq!(out.edges.unwrap(), expect);
}

#[test]
fn synthetic_corpus_is_deterministic_and_adjacent() {
    let spec = SyntheticSpec {
        seed: 3,
        ..SyntheticSpec::default()
    };
    let a = gen_synthetic(&spec, 6).unwrap();
    assert_eq!(a, gen_synthetic(&spec, 6).unwrap());
    for s in &a {
        assert_eq!(s.shape, [32, 32, 16]);
        for k in 1..=3u8 {
            assert!(s.labels.contains(&k));
        }
        for k in 2..=3u8 {
            assert!((1..k).any(|j| structures_touch(&s.labels, s.shape, j, k)));
        }
    }
}

/// Per-voxel maximum a posteriori class from intensity alone, with the
/// generator's class means, the noise level and empirical class priors.
fn bayes_labels(image: &[f32], priors: &[f64], delta: f64, sigma: f64) -> Vec<u8> {
    image
        .iter()
        .map(|&x| {
            let score = |k: usize| {
                let mu = BACKGROUND_INTENSITY + k as f64 * delta;
                priors[k].ln() - (x as f64 - mu).powi(2) / (2.0 * sigma * sigma)
            };
            (0..priors.len()).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() as u8
        })
        .collect()
}

/// Voxels with an in-slice 8-neighbour of a different label.
fn boundary_adjacent(labels: &[u8], s: Shape) -> Vec<bool> {
    let mut out = vec![false; labels.len()];
    for r in 0..s[0] {
        for c in 0..s[1] {
            for z in 0..s[2] {
                let l = labels[idx(s, [r, c, z])];
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && rr < s[0] as i64 && cc < s[1] as i64 {
                            out[idx(s, [r, c, z])] |= labels[idx(s, [rr as usize, cc as usize, z])] != l;
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn intensity_alone_cannot_resolve_low_contrast_boundaries() {
    let spec = SyntheticSpec {
        seed: 9,
        contrast_delta: 5.0,
        noise_sigma: 20.0,
        ..SyntheticSpec::default()
    };
    let corpus = gen_synthetic(&spec, 10).unwrap();
    let k = spec.num_classes();
    let mut priors = vec![0.0; k];
    for s in &corpus {
        for &l in &s.labels {
            priors[l as usize] += 1.0;
        }
    }
    let total: f64 = priors.iter().sum();
    priors.iter_mut().for_each(|p| *p /= total);
    let mut scores = Vec::new();
    for s in &corpus {
        let pred = bayes_labels(&s.image, &priors, spec.contrast_delta, spec.noise_sigma);
        let near = boundary_adjacent(&s.labels, s.shape);
        let pick = |v: &[u8]| v.iter().zip(&near).filter(|(_, &n)| n).map(|(&l, _)| l).collect::<Vec<u8>>();
        let (p, r) = (pick(&pred), pick(&s.labels));
        for c in 1..k as u8 {
            if let Some(d) = dsc(&p, &r, c).unwrap() {
                scores.push(d);
            }
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean < 0.8, "intensity-only boundary DSC {mean}");
}
