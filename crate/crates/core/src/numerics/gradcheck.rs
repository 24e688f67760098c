use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Entries whose step had to shrink because `θ ± ε` crossed a kink.
    pub reduced_steps: usize,
    pub rel_tol: f64,
    pub passed: bool,
}

const MIN_EPSILON: f64 = 1e-7;

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking();
    let out = f(&mut tape, store)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok((v, tape.kinks().signature))
}

/// Compares the tape gradient of `f` with the five-point central difference
/// `(8(f(θ+ε) − f(θ−ε)) − (f(θ+2ε) − f(θ−2ε))) / 12ε`, whose truncation
/// error is `O(ε⁴)`, for every scalar in `store`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// When a perturbation flips the branch of a ReLU, clamp, or hinge the step is
/// divided by ten (down to 1e-7) so the difference stays on one smooth piece.
pub fn finite_diff_check<F>(mut f: F, store: &mut ParamStore, epsilon: f64, rel_tol: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(MIN_EPSILON..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon:e} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::with_kink_tracking();
    let out = f(&mut tape, store)?;
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {base}")));
    }
    let signature = tape.kinks().signature;
    tape.backward(out)?;
    store.zero_grad();
    tape.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.value.grad().to_vec()).collect();
    store.zero_grad();

    let mut report = CheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        reduced_steps: 0,
        rel_tol,
        passed: true,
    };
    for p in 0..store.len() {
        for i in 0..analytic[p].len() {
            let id = ParamId(p);
            let orig = store.get(id).value.data()[i];
            let mut eps = epsilon;
            let numeric = loop {
                let mut at = |offset: f64| {
                    store.get_mut(id).value.data_mut()[i] = orig + offset;
                    let r = evaluate(&mut f, store);
                    store.get_mut(id).value.data_mut()[i] = orig;
                    r
                };
                let (f1, s1) = at(eps)?;
                let (m1, t1) = at(-eps)?;
                let (f2, s2) = at(2.0 * eps)?;
                let (m2, t2) = at(-2.0 * eps)?;
                let smooth = [s1, t1, s2, t2].iter().all(|&s| s == signature);
                if smooth || eps / 10.0 < MIN_EPSILON {
                    break (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * eps);
                }
                if eps == epsilon {
                    report.reduced_steps += 1;
                }
                eps /= 10.0;
            };
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_error <= rel_tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor2::scalar(3.0), true).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
        let numeric = ((3.0f64 + 1e-4).powi(2) - (3.0f64 - 1e-4).powi(2)) / 2e-4;
        assert!((numeric - 6.0).abs() < 1e-6);
        let report = finite_diff_check(
            |t, s| {
                let x = t.param(s, id);
                t.mul(x, x)
            },
            &mut store,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn nan_objective_is_an_evaluation_error() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor2::scalar(-1.0), true).unwrap();
        let err = finite_diff_check(
            |t, s| {
                let x = t.param(s, id);
                t.sqrt(x)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn epsilon_bounds_are_enforced() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor2::scalar(1.0), true).unwrap();
        let err = finite_diff_check(|t, _| Ok(t.constant(Tensor2::scalar(0.0))), &mut store, 1e-2, 1e-4);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }
}
