//! Central finite-difference verification of analytic gradients.

use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Perturbation applied to each parameter in turn.
    pub epsilon: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheck {
    // close to the cube root of f64 machine epsilon, which balances
    // truncation against cancellation in the central difference
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-6,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Perturbs each entry of `theta` by `±epsilon`, evaluates `loss` and
/// compares `(f(θ+ε) - f(θ-ε)) / 2ε` against `analytic`. Returns the largest
/// relative error. `theta` is restored before returning.
pub fn grad_check<F>(
    theta: &mut [f64],
    analytic: &[f64],
    cfg: GradCheck,
    mut loss: F,
) -> Result<f64, NnError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(cfg.epsilon > 0.0) {
        return Err(NnError::InvalidArgument(
            "finite-difference epsilon must be positive".into(),
        ));
    }
    if theta.len() != analytic.len() {
        return Err(NnError::Shape(format!(
            "{} parameters but {} analytic gradients",
            theta.len(),
            analytic.len()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + cfg.epsilon;
        let up = loss(theta);
        theta[i] = orig - cfg.epsilon;
        let down = loss(theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.epsilon);
        worst = worst.max(relative_error(analytic[i], numeric, cfg.floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_rejected() {
        let cfg = GradCheck { epsilon: 0.0, ..GradCheck::default() };
        assert!(grad_check(&mut [1.0], &[1.0], cfg, |t| t[0]).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut t = [1.0, 2.0];
        let ok = grad_check(&mut t, &[2.0, 4.0], GradCheck::default(), |t| t[0] * t[0] + t[1] * t[1]).unwrap();
        assert!(ok < 1e-8);
        let bad = grad_check(&mut t, &[2.0, 3.0], GradCheck::default(), |t| t[0] * t[0] + t[1] * t[1]).unwrap();
        assert!(bad > 0.1);
        assert_eq!(t, [1.0, 2.0]);
    }
}
