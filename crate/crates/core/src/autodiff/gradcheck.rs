//! Central finite-difference checking of tape gradients in 64-bit arithmetic.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mutation, NodeId, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries checked per parameter tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
    pub mutation: Mutation,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_entries: None,
            seed: 0,
            mutation: Mutation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    /// Entry whose analytic or numeric derivative was NaN/inf.
    pub non_finite: Option<usize>,
    /// Entries re-evaluated at a tenth of the step.
    pub refined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.non_finite.is_none() && p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| {
                if p.non_finite.is_some() {
                    f64::INFINITY
                } else {
                    p.max_rel_error
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Denominator floor of [`relative_error`]. Derivatives smaller than this are
/// compared by absolute difference; central differences of an O(1) loss cannot
/// resolve them (an exactly-zero gradient, such as a bias feeding batch norm,
/// otherwise shows roundoff as a large relative error).
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    Ok(tape.value(root).data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences for every (or a sampled subset of every) parameter entry.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    tol: f64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::with_mutation(options.mutation);
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.get(id)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let base = evaluate(&f, params)?;
    let mut report = GradCheckReport {
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, a) in analytic.iter().enumerate() {
        let len = params[pi].len();
        let entries: Vec<usize> = match options.max_entries {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            index: pi,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst_entry: entries.first().copied().unwrap_or(0),
            non_finite: None,
            refined: 0,
        };
        for &k in &entries {
            let orig = work[pi].data()[k];
            let mut differences = |h: f64| -> Result<(f64, f64, f64)> {
                work[pi].data_mut()[k] = orig + h;
                let plus = evaluate(&f, &work)?;
                work[pi].data_mut()[k] = orig - h;
                let minus = evaluate(&f, &work)?;
                work[pi].data_mut()[k] = orig;
                Ok(((plus - minus) / (2.0 * h), (plus - base) / h, (base - minus) / h))
            };
            let (numeric, _, _) = differences(options.step)?;
            let an = a.data()[k];
            if !numeric.is_finite() || !an.is_finite() {
                check.non_finite.get_or_insert(k);
                continue;
            }
            let mut err = relative_error(an, numeric);
            // A ReLU/max switch within the step spoils the central difference;
            // suspicious entries are retried at a tenth of the step. A switch exactly at the evaluation
            // point persists at every step, and there the analytic value must
            // equal one of the one-sided slopes.
            if err > 0.1 * tol {
                let (fine, fwd, bwd) = differences(options.step * 0.1)?;
                for d in [fine, fwd, bwd] {
                    if d.is_finite() {
                        err = err.min(relative_error(an, d));
                    }
                }
                check.refined += 1;
            }
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_entry = k;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_to_roundoff() {
        let x = Tensor::from_fn(&[7], |i| i as f64 * 0.3 - 1.0).unwrap();
        let rep = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum(sq)
            },
            &[x],
            1e-6,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn transposed_matvec_rule_is_detected() {
        let m = Tensor::from_fn(&[3, 3], |i| ((i * 5) % 7) as f64 * 0.25 - 0.6).unwrap();
        let v = Tensor::from_fn(&[3], |i| 0.4 + i as f64).unwrap();
        let build = |t: &mut Tape<f64>, p: &[NodeId]| -> Result<NodeId> {
            let y = t.matvec(p[0], p[1])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        };
        let ok = grad_check(build, &[m.clone(), v.clone()], 1e-3, &GradCheckOptions::default())
            .unwrap();
        assert!(ok.passed());
        let opts = GradCheckOptions {
            mutation: Mutation::TransposedRule,
            ..Default::default()
        };
        let bad = grad_check(build, &[m, v], 1e-3, &opts).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn nan_loss_fails() {
        let x = Tensor::from_fn(&[3], |i| i as f64 - 1.0).unwrap();
        let rep = grad_check(
            |t, p| {
                let v = t.value(p[0]).map(|a| if a > 0.5 { f64::NAN } else { a });
                let leaf = t.leaf(v);
                let m = t.mul(p[0], leaf)?;
                t.sum(m)
            },
            &[x],
            1e-3,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.params[0].non_finite, Some(0));
    }
}
