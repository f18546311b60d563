//! Linear-head estimators for the logistic reward model.

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::{logistic_loss, sigmoid};

pub(crate) fn check_reward(r: f64) -> Result<()> {
    if r == 0.0 || r == 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("reward must be 0 or 1, got {r}")))
    }
}

/// One gradient step on the per-sample regularized logistic loss:
/// `θ ← θ − η[(σ(θᵀz) − r)·z + λ·θ]`.
pub fn logistic_sgd_step(
    theta: &mut [f64],
    z: &[f64],
    r: f64,
    eta: f64,
    lambda: f64,
) -> Result<()> {
    check_reward(r)?;
    if z.len() != theta.len() {
        return Err(invalid(format!(
            "feature has dimension {}, head has {}",
            z.len(),
            theta.len()
        )));
    }
    let resid = sigmoid(linalg::dot(theta, z)) - r;
    for (t, &zi) in theta.iter_mut().zip(z) {
        *t -= eta * (resid * zi + lambda * *t);
    }
    Ok(())
}

/// Squared-loss counterpart used by the regression-head baseline:
/// `θ ← θ − η[(θᵀz − r)·z + λ·θ]`.
pub fn squared_sgd_step(theta: &mut [f64], z: &[f64], r: f64, eta: f64, lambda: f64) -> Result<()> {
    check_reward(r)?;
    if z.len() != theta.len() {
        return Err(invalid("feature and head dimensions differ"));
    }
    let resid = linalg::dot(theta, z) - r;
    for (t, &zi) in theta.iter_mut().zip(z) {
        *t -= eta * (resid * zi + lambda * *t);
    }
    Ok(())
}

/// `Σ CE(σ(θᵀz_s), r_s) + (λ/2)‖θ‖²`.
pub fn logistic_objective(history: &[(Vec<f64>, f64)], theta: &[f64], lambda: f64) -> f64 {
    let data: f64 = history
        .iter()
        .map(|(z, r)| logistic_loss(linalg::dot(theta, z), *r))
        .sum();
    data + 0.5 * lambda * linalg::dot(theta, theta)
}

/// Gradient of [`logistic_objective`].
pub fn logistic_objective_grad(
    history: &[(Vec<f64>, f64)],
    theta: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let mut g: Vec<f64> = theta.iter().map(|t| lambda * t).collect();
    for (z, r) in history {
        let resid = sigmoid(linalg::dot(theta, z)) - r;
        for (gi, &zi) in g.iter_mut().zip(z) {
            *gi += resid * zi;
        }
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Settings for [`fit_logistic_head`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

/// Minimize the L2-regularized logistic loss over the full history with
/// damped Newton iterations, stopping once the gradient's ∞-norm is at most
/// `opts.tolerance`.
pub fn fit_logistic_head(
    history: &[(Vec<f64>, f64)],
    lambda: f64,
    start: Option<&[f64]>,
    opts: FitOptions,
) -> Result<Vec<f64>> {
    let d = match history.first() {
        Some((z, _)) => z.len(),
        None => return Err(invalid("cannot fit a head on an empty history")),
    };
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    for (z, r) in history {
        check_reward(*r)?;
        if z.len() != d {
            return Err(invalid("history features have inconsistent dimensions"));
        }
    }
    let mut theta = match start {
        Some(s) if s.len() == d => s.to_vec(),
        Some(_) => return Err(invalid("warm start has the wrong dimension")),
        None => vec![0.0; d],
    };
    let mut grad = logistic_objective_grad(history, &theta, lambda);
    let mut obj = logistic_objective(history, &theta, lambda);
    for _ in 0..opts.max_iterations {
        if inf_norm(&grad) <= opts.tolerance {
            return Ok(theta);
        }
        let mut hess = Matrix::zeros(d, d);
        for i in 0..d {
            hess[(i, i)] = lambda;
        }
        for (z, _) in history {
            let s = sigmoid(linalg::dot(&theta, z));
            let w = s * (1.0 - s);
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                let wi = w * z[i];
                for j in 0..d {
                    hess[(i, j)] += wi * z[j];
                }
            }
        }
        let step = hess.cholesky_solve(&grad).ok_or_else(|| {
            Error::NumericalDegeneracy("logistic Hessian is not positive definite".into())
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let cand_obj = logistic_objective(history, &cand, lambda);
            // Armijo condition with the Newton decrement.
            if cand_obj <= obj - 1e-4 * t * linalg::dot(&grad, &step) || cand_obj <= obj {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = logistic_objective_grad(history, &theta, lambda);
        if !accepted {
            break;
        }
    }
    let grad_norm = inf_norm(&grad);
    if grad_norm <= opts.tolerance {
        Ok(theta)
    } else {
        Err(Error::Convergence {
            iterations: opts.max_iterations,
            grad_norm,
        })
    }
}
