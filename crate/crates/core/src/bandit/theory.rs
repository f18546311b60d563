use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Upper bound on the sigmoid's derivative.
pub const SIGMOID_LIPSCHITZ: f64 = 0.25;

/// Constants entering the confidence-width schedule of the logistic
/// neural-linear bandit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    /// Sub-Gaussian noise scale ν.
    pub nu: f64,
    /// Bound `M ≥ ‖θ*‖₂`.
    pub head_norm: f64,
    /// Failure probability δ.
    pub delta: f64,
    /// Lower bound κ_σ on the sigmoid derivative over the reachable logits.
    pub kappa_sigma: f64,
    /// Network depth L.
    pub depth: f64,
    /// Feature dimension d.
    pub dim: f64,
    /// Design regularization λ.
    pub lambda: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nu", self.nu),
            ("head_norm", self.head_norm),
            ("delta", self.delta),
            ("kappa_sigma", self.kappa_sigma),
            ("depth", self.depth),
            ("dim", self.dim),
            ("lambda", self.lambda),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.delta >= 1.0 {
            return Err(invalid("delta must be below 1"));
        }
        if self.kappa_sigma > SIGMOID_LIPSCHITZ {
            return Err(invalid(format!(
                "kappa_sigma cannot exceed {SIGMOID_LIPSCHITZ}, got {}",
                self.kappa_sigma
            )));
        }
        Ok(())
    }
}

/// `α_t = (1/κ_σ)·(ν·sqrt(2(d·ln(1 + L·t²/λ) + ln(1/δ))) + sqrt(λ)·M)`.
pub fn theoretical_alpha(t: u64, p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    if t == 0 {
        return Err(invalid("step index starts at 1"));
    }
    let t = t as f64;
    let log_det = p.dim * (p.depth * t * t / p.lambda).ln_1p();
    let width = p.nu * (2.0 * (log_det + (1.0 / p.delta).ln())).sqrt();
    Ok((width + p.lambda.sqrt() * p.head_norm) / p.kappa_sigma)
}
