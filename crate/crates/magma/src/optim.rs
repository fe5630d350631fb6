//! Deterministic quasi-Newton ascent for low-dimensional hyperparameter
//! objectives.
//!
//! The objectives maximized in this crate have 3 unconstrained coordinates
//! (log-transformed positive parameters, plus one plain real for the mean
//! constant), so a dense BFGS with backtracking line search and projection
//! onto coordinate-wise lower bounds is both simple and fast. The iteration
//! is fully deterministic: same inputs, same iterates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Convergence: projected-gradient max-norm below this.
pub const GRAD_TOL: f64 = 1e-5;
/// Iteration cap per start.
pub const MAX_ITER: usize = 200;
/// Maximum number of perturbed re-starts after a non-finite objective.
pub const MAX_PERTURBATIONS: usize = 3;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const BOUND_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut DVector<f64>, lower: &[f64]) {
    for (xi, &lo) in x.iter_mut().zip(lower) {
        if *xi < lo {
            *xi = lo;
        }
    }
}

/// Gradient with coordinates frozen at an active lower bound when the step
/// would push them further out.
fn projected_grad(x: &DVector<f64>, grad: &DVector<f64>, lower: &[f64]) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        // Maximization: a positive gradient wants to increase x_i, which is
        // always feasible; only an outward push at the bound is frozen.
        if x[i] <= lower[i] + BOUND_EPS && grad[i] < 0.0 {
            0.0
        } else {
            grad[i]
        }
    })
}

/// Maximizes `value` from `x0` subject to `x[i] >= lower[i]`.
///
/// `value_grad` must return the objective and its gradient at a point;
/// `value` alone is used for line-search trials. A trial that errors or is
/// non-finite is treated as rejected. Returns an error if the objective is
/// non-finite at the starting point.
pub fn maximize<F, G>(
    value: F,
    value_grad: G,
    x0: &[f64],
    lower: &[f64],
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    assert_eq!(lower.len(), dim);
    let mut x = DVector::from_column_slice(x0);
    project(&mut x, lower);

    let (mut fx, g) = value_grad(x.as_slice())?;
    if !fx.is_finite() {
        return Err(Error::OptimizerFailed {
            attempts: 0,
            message: format!("objective is {fx} at the starting point"),
        });
    }
    let mut grad = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut iterations = 0;
    let mut step_init = 1.0f64;
    let mut stagnant = 0usize;

    for _ in 0..MAX_ITER {
        let pg = projected_grad(&x, &grad, lower);
        if pg.amax() < GRAD_TOL {
            return Ok(OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        // Ascent direction from the inverse-Hessian approximation; fall back
        // to steepest ascent if curvature information is unusable.
        let mut dir = &h * &grad;
        for i in 0..dim {
            if x[i] <= lower[i] + BOUND_EPS && dir[i] < 0.0 {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&grad) <= 0.0 || !dir.iter().all(|d| d.is_finite()) {
            dir = pg.clone();
        }

        // Start near the last accepted step length; repeatedly halving from
        // 1.0 on an ill-scaled surface wastes most of the evaluations.
        let mut step = step_init;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = &x + step * &dir;
            project(&mut trial, lower);
            let actual_step = &trial - &x;
            if actual_step.amax() == 0.0 {
                break;
            }
            match value(trial.as_slice()) {
                Ok(f_trial)
                    if f_trial.is_finite()
                        && f_trial >= fx
                        && f_trial >= fx + ARMIJO_C1 * grad.dot(&actual_step) =>
                {
                    accepted = Some((trial, f_trial));
                    break;
                }
                _ => step *= 0.5,
            }
        }

        let Some((x_new, f_accepted)) = accepted else {
            // No acceptable step along this direction: stationary for our
            // purposes.
            return Ok(OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                iterations,
                converged: false,
            });
        };
        step_init = (2.0 * step).min(1.0);
        if f_accepted - fx <= 1e-11 * (1.0 + fx.abs()) {
            stagnant += 1;
            if stagnant >= 2 {
                return Ok(OptimResult {
                    x: x_new.as_slice().to_vec(),
                    value: f_accepted,
                    iterations,
                    converged: false,
                });
            }
        } else {
            stagnant = 0;
        }

        let (f_new, g_new) = value_grad(x_new.as_slice())?;
        if !f_new.is_finite() {
            return Ok(OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                iterations,
                converged: false,
            });
        }
        let grad_new = DVector::from_vec(g_new);
        let s = &x_new - &x;
        let yv = &grad_new - &grad;
        // BFGS update on the inverse Hessian of the negated objective; in
        // ascent form the curvature condition flips sign.
        let sy = -s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let i_mat = DMatrix::<f64>::identity(dim, dim);
            let left = &i_mat + rho * &s * yv.transpose();
            h = &left * h * left.transpose() + rho * &s * s.transpose();
        }
        x = x_new;
        fx = f_new;
        grad = grad_new;
    }

    Ok(OptimResult {
        x: x.as_slice().to_vec(),
        value: fx,
        iterations,
        converged: false,
    })
}

/// [`maximize`], retrying from deterministically perturbed starting points
/// when the objective is non-finite at the start, up to
/// [`MAX_PERTURBATIONS`] times.
pub fn maximize_with_restarts<F, G>(
    value: F,
    value_grad: G,
    x0: &[f64],
    lower: &[f64],
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut last_message = String::new();
    for attempt in 0..=MAX_PERTURBATIONS {
        let start: Vec<f64> = if attempt == 0 {
            x0.to_vec()
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(0x7c0ffee ^ attempt as u64);
            x0.iter()
                .zip(lower)
                .map(|(&x, &lo)| (x + rng.gen_range(-0.5..0.5)).max(lo))
                .collect()
        };
        match maximize(&value, &value_grad, &start, lower) {
            Ok(res) if res.value.is_finite() => return Ok(res),
            Ok(res) => last_message = format!("non-finite objective {}", res.value),
            Err(e) => last_message = e.to_string(),
        }
    }
    Err(Error::OptimizerFailed {
        attempts: MAX_PERTURBATIONS + 1,
        message: last_message,
    })
}
