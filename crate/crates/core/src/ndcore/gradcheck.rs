use crate::ndcore::{dot, DenseArray, Rng};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// Compare the analytic gradient returned by `f` at `x` against central
/// differences with step [`FD_STEP`].
///
/// `f` returns `(value, gradient)`; only the value is used at the perturbed
/// points. Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, x: &DenseArray, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&DenseArray) -> (f64, DenseArray),
{
    let (_, analytic) = f(x);
    assert_eq!(
        analytic.len(),
        x.len(),
        "analytic gradient has {} entries for {} inputs",
        analytic.len(),
        x.len()
    );
    if let Some(bad) = analytic.data().iter().position(|g| !g.is_finite()) {
        return GradCheckReport {
            max_relative_error: f64::INFINITY,
            worst_coordinate: bad,
            passed: false,
        };
    }

    let mut probe = x.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe).0;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe).0;
        probe.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let rel = if numeric.is_finite() {
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR)
        } else {
            f64::INFINITY
        };
        if rel > worst.0 || (rel.is_nan() && !worst.0.is_nan()) {
            worst = (rel, i);
        }
    }
    GradCheckReport {
        max_relative_error: worst.0,
        worst_coordinate: worst.1,
        passed: worst.0 <= tolerance,
    }
}

/// [`finite_diff_check`] restricted to a random subspace: `x(t) = x + Σ t_k v_k`
/// with `directions` unit-norm Gaussian directions, evaluated at `t = 0`.
///
/// Used for whole networks, where thousands of weight coordinates always
/// include some whose gradient sits below the relative-error floor.
pub fn finite_diff_check_subspace<F>(
    mut f: F,
    x: &DenseArray,
    directions: usize,
    rng: &mut Rng,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&DenseArray) -> (f64, DenseArray),
{
    let basis: Vec<Vec<f64>> = (0..directions)
        .map(|_| {
            let v: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|e| e / n).collect()
        })
        .collect();
    let lift = |t: &DenseArray| {
        let mut p = x.clone();
        for (tk, v) in t.data().iter().zip(&basis) {
            for (pi, vi) in p.data_mut().iter_mut().zip(v) {
                *pi += tk * vi;
            }
        }
        p
    };
    finite_diff_check(
        |t| {
            let (value, grad) = f(&lift(t));
            let projected = basis.iter().map(|v| dot(v, grad.data())).collect();
            (value, DenseArray::vector(projected))
        },
        &DenseArray::zeros(&[directions]),
        tolerance,
    )
}
