//! Bound-constrained damped least squares.
//!
//! A Levenberg-Marquardt iteration with Marquardt diagonal scaling and the
//! gain-ratio damping update, where every trial point is projected onto the
//! box bounds. Trial points are only accepted when they lower the cost, so
//! the result is never worse than the (projected) starting point.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NllsError {
    #[error("residuals are not finite at the starting point")]
    NonFiniteStart,
    #[error("expected {expected} parameters, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lower bound {lower} exceeds upper bound {upper} for parameter {index}")]
    InvalidBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
}

/// A residual vector `r(x)`; the solver minimises `½‖r(x)‖²`.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;

    fn n_residuals(&self) -> usize;

    /// Writes `r(x)` into `out`. Non-finite entries mark `x` as infeasible.
    fn residuals(&self, x: &[f64], out: &mut [f64]);

    /// Writes `∂r/∂x` into `jac`. Defaults to central differences.
    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        central_difference_jacobian(|x, out| self.residuals(x, out), x, self.n_residuals(), jac);
    }
}

/// Central-difference Jacobian with a relative step.
pub fn central_difference_jacobian(
    f: impl Fn(&[f64], &mut [f64]),
    x: &[f64],
    m: usize,
    jac: &mut DMatrix<f64>,
) {
    let mut xp = x.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for c in 0..x.len() {
        let h = fd_step(x[c]);
        xp[c] = x[c] + h;
        f(&xp, &mut plus);
        xp[c] = x[c] - h;
        f(&xp, &mut minus);
        xp[c] = x[c];
        for r in 0..m {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
}

/// Step used by the finite-difference Jacobians.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Per-parameter box constraints; infinite entries are unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_lower(mut self, index: usize, lower: f64) -> Self {
        self.lower[index] = lower;
        self
    }

    fn project(&self, x: &mut [f64]) {
        for ((x, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*lo, *hi);
        }
    }

    fn validate(&self, n: usize) -> Result<(), NllsError> {
        for v in [&self.lower, &self.upper] {
            if v.len() != n {
                return Err(NllsError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        for (index, (&lower, &upper)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lower <= upper) {
                return Err(NllsError::InvalidBounds {
                    index,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllsOptions {
    pub max_iterations: usize,
    /// Initial damping, relative to the diagonal of `JᵀJ` (Marquardt
    /// scaling, so the value is dimensionless).
    pub damping_init: f64,
    /// Stop when an accepted step lowers the cost by less than this
    /// fraction.
    pub cost_tolerance: f64,
    /// Stop when the projected gradient falls below this value.
    pub gradient_tolerance: f64,
    /// Stop when the step is below this fraction of `‖x‖`.
    pub step_tolerance: f64,
}

impl Default for NllsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            damping_init: 1e-3,
            cost_tolerance: 1e-15,
            gradient_tolerance: 1e-14,
            step_tolerance: 1e-14,
        }
    }
}

impl NllsOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    IterationCap,
    Converged,
    /// No damping level produced a lower cost.
    Stagnated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllsReport {
    pub x: Vec<f64>,
    /// `‖r‖` at the projected starting point.
    pub initial_norm: f64,
    pub final_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

const MAX_DAMPING_RETRIES: usize = 40;

fn sq_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn all_finite(r: &[f64]) -> bool {
    r.iter().all(|v| v.is_finite())
}

/// Minimises `½‖r(x)‖²` over the box `bounds`, starting from `x0`.
pub fn nlls_solve<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    bounds: &Bounds,
    options: &NllsOptions,
) -> Result<NllsReport, NllsError> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    if x0.len() != n {
        return Err(NllsError::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    bounds.validate(n)?;
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    if !all_finite(&r) {
        return Err(NllsError::NonFiniteStart);
    }
    let mut cost = sq_norm(&r);
    let initial_norm = cost.sqrt();
    let report = |x: Vec<f64>, cost: f64, iterations, termination| NllsReport {
        x,
        initial_norm,
        final_norm: cost.sqrt(),
        iterations,
        termination,
    };
    if n == 0 || m == 0 {
        return Ok(report(x, cost, 0, Termination::Converged));
    }

    let mut jac = DMatrix::zeros(m, n);
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];
    let mut mu = None;
    let mut nu = 2.0;
    for iter in 0..options.max_iterations {
        if cost == 0.0 {
            return Ok(report(x, cost, iter, Termination::Converged));
        }
        problem.jacobian(&x, &mut jac);
        let rv = DVector::from_column_slice(&r);
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;
        if projected_gradient_norm(&x, &g, bounds) <= options.gradient_tolerance {
            return Ok(report(x, cost, iter, Termination::Converged));
        }
        let diag_max = a.diagonal().max();
        let scale: Vec<f64> = a
            .diagonal()
            .iter()
            .map(|d| d.max(1e-12 * diag_max).max(1e-300))
            .collect();
        let mut damping = *mu.get_or_insert(options.damping_init);
        let mut accepted = false;
        for _ in 0..MAX_DAMPING_RETRIES {
            let mut lhs = a.clone();
            for (i, s) in scale.iter().enumerate() {
                lhs[(i, i)] += damping * s;
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&g))) else {
                damping = (damping * nu).max(1e-12);
                nu *= 2.0;
                continue;
            };
            for i in 0..n {
                trial[i] = x[i] + step[i];
            }
            bounds.project(&mut trial);
            problem.residuals(&trial, &mut r_trial);
            let trial_cost = sq_norm(&r_trial);
            if all_finite(&r_trial) && trial_cost < cost {
                let taken = DVector::from_iterator(n, trial.iter().zip(&x).map(|(t, x)| t - x));
                // predicted reduction of ½‖r‖² by the linear model
                let predicted = -(taken.dot(&g) + 0.5 * taken.dot(&(&a * &taken)));
                let rho = if predicted > 0.0 {
                    0.5 * (cost - trial_cost) / predicted
                } else {
                    0.0
                };
                mu = Some(damping * (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3)));
                nu = 2.0;
                let step_norm = taken.norm();
                let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let relative_drop = (cost - trial_cost) / cost;
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = trial_cost;
                accepted = true;
                if relative_drop < options.cost_tolerance
                    || step_norm <= options.step_tolerance * (x_norm + options.step_tolerance)
                {
                    return Ok(report(x, cost, iter + 1, Termination::Converged));
                }
                break;
            }
            damping = (damping * nu).max(1e-12);
            nu *= 2.0;
        }
        if !accepted {
            return Ok(report(x, cost, iter, Termination::Stagnated));
        }
    }
    let iterations = options.max_iterations;
    Ok(report(x, cost, iterations, Termination::IterationCap))
}

/// Infinity norm of the gradient with components pushing into an active
/// bound removed.
fn projected_gradient_norm(x: &[f64], g: &DVector<f64>, bounds: &Bounds) -> f64 {
    x.iter()
        .zip(g.iter())
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((&x, &g), (&lo, &hi))| {
            if (x <= lo && g > 0.0) || (x >= hi && g < 0.0) {
                0.0
            } else {
                g.abs()
            }
        })
        .fold(0.0, f64::max)
}
