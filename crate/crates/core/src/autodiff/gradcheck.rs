//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of the scalar built by `f` against
/// `(f(θ+h) - f(θ-h)) / 2h` at every coordinate of every parameter.
///
/// The error at one coordinate is `|a - n| / max(1, |a|, |n|)`; the check
/// passes when the largest such error is below `tol`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_against(&f, &f, 1.0, params, h, tol)
}

/// Like [`grad_check`], but takes the tape gradient from `analytic` and the
/// finite differences from `reference`, expecting
/// `grad(analytic) = factor * d(reference)`. Used for graphs whose backward
/// pass deliberately differs from the derivative of their forward value.
pub fn grad_check_against<F, G>(
    analytic: G,
    reference: F,
    factor: f64,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let f = reference;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = analytic(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = evaluate(&f, &work);
            work[pi].data_mut()[ci] = orig - h;
            let minus = evaluate(&f, &work);
            work[pi].data_mut()[ci] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::invalid(format!(
                        "objective failed at parameter {pi}, coordinate {ci}: {e}"
                    )))
                }
                _ => {
                    return Err(Error::NonFinite {
                        op: format!("grad_check objective (parameter {pi}, coordinate {ci})"),
                        index: ci,
                    })
                }
            };
            let numeric = factor * (plus - minus) / (2.0 * h);
            let a = analytic.data()[ci];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = Tensor::vector((0..5).map(|_| rng.random_range(-2.0..2.0)).collect());
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum(sq, None)
            },
            &[theta],
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_adjoint_fails() {
        let theta = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let report = grad_check(
            |t, p| {
                // cube with a deliberately wrong (2x instead of 3x^2) adjoint
                let y = t.custom_unary(
                    p[0],
                    "bad_cube",
                    |x| x.map(|v| v * v * v),
                    |x, _, g| {
                        let d = x.data().iter().zip(g.data()).map(|(v, gv)| 2.0 * v * gv).collect();
                        Tensor::new(x.shape().to_vec(), d).unwrap()
                    },
                )?;
                t.sum(y, None)
            },
            &[theta],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.worst.is_some());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let theta = Tensor::vector(vec![1e-6]);
        let err = grad_check(
            |t, p| {
                let l = t.log(p[0], 0.0)?;
                t.sum(l, None)
            },
            &[theta],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 0"), "{err}");
    }

    #[test]
    fn reversed_reference() {
        let theta = Tensor::vector(vec![0.5, -1.5]);
        let rev = |t: &mut Tape, p: &[Var]| {
            let r = t.grl(p[0], 2.0)?;
            let sq = t.mul(r, r)?;
            t.sum(sq, None)
        };
        let plain = |t: &mut Tape, p: &[Var]| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq, None)
        };
        let ok = grad_check_against(rev, plain, -2.0, std::slice::from_ref(&theta), DEFAULT_STEP, 1e-6).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = grad_check_against(rev, plain, 1.0, &[theta], DEFAULT_STEP, 1e-6).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|t, p| t.sum(p[0], None), &[Tensor::scalar(1.0)], 0.0, 1e-4).is_err());
    }
}
