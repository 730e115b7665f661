//! Per-window losses. Both are summed over the decided positions and
//! averaged over the batch.

use super::dense::sigmoid;
use super::tensor::Real;
use super::NnError;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

fn check(len: usize, labels: usize, batch: usize) -> Result<(), NnError> {
    if len != labels {
        return Err(NnError::Shape(format!(
            "{len} predictions for {labels} labels"
        )));
    }
    if batch == 0 {
        return Err(NnError::Shape("batch size must be positive".into()));
    }
    Ok(())
}

/// Binary cross-entropy over probabilities. Returns the loss and its
/// gradient with respect to `p_hat`, evaluated at the clamped value.
pub fn bce_loss<T: Real>(p_hat: &[T], u: &[u8], batch: usize) -> Result<(T, Vec<T>), NnError> {
    check(p_hat.len(), u.len(), batch)?;
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let inv_b = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(p_hat.len());
    for (&p, &label) in p_hat.iter().zip(u) {
        let p = p.max(lo).min(hi);
        if label == 1 {
            loss -= p.ln();
            grad.push(-inv_b / p);
        } else {
            loss -= (T::one() - p).ln();
            grad.push(inv_b / (T::one() - p));
        }
    }
    Ok((loss * inv_b, grad))
}

/// Cross-entropy evaluated on pre-sigmoid logits, the numerically stable
/// form used in training. The gradient is with respect to the logits.
pub fn bce_with_logits<T: Real>(logits: &[T], u: &[u8], batch: usize) -> Result<(T, Vec<T>), NnError> {
    check(logits.len(), u.len(), batch)?;
    let inv_b = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&s, &label) in logits.iter().zip(u) {
        let y = if label == 1 { T::one() } else { T::zero() };
        // max(s, 0) - s y + log(1 + exp(-|s|))
        loss += s.max(T::zero()) - s * y + (-s.abs()).exp().ln_1p();
        grad.push((sigmoid(s) - y) * inv_b);
    }
    Ok((loss * inv_b, grad))
}

/// Squared error `sum (p - u)^2`, batch-averaged.
pub fn mse_loss<T: Real>(p_hat: &[T], u: &[u8], batch: usize) -> Result<(T, Vec<T>), NnError> {
    check(p_hat.len(), u.len(), batch)?;
    let inv_b = T::one() / T::lit(batch as f64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(p_hat.len());
    for (&p, &label) in p_hat.iter().zip(u) {
        let e = p - T::lit(label as f64);
        loss += e * e;
        grad.push(two * e * inv_b);
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheck};
    use proptest::prelude::*;

    #[test]
    fn bce_values() {
        let (j, _) = bce_loss(&[1.0f64, 0.0, 1.0], &[1, 0, 1], 1).unwrap();
        assert!(j < 1e-6);
        let (j, _) = bce_loss(&[0.5f64; 6], &[1, 0, 1, 1, 0, 0], 1).unwrap();
        assert!((j - 6.0 * 2f64.ln()).abs() < 1e-12);
        // batch of two windows with three positions each
        let (j, _) = bce_loss(&[0.5f64; 6], &[1, 0, 1, 1, 0, 0], 2).unwrap();
        assert!((j - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[0.5f64; 2], &[1], 1).is_err());
    }

    #[test]
    fn mse_values() {
        let (j, _) = mse_loss(&[1.0f64, 0.0], &[1, 0], 1).unwrap();
        assert_eq!(j, 0.0);
        let (j, g) = mse_loss(&[1.0f64, 0.0], &[0, 0], 1).unwrap();
        assert_eq!(j, 1.0);
        assert_eq!(g, vec![2.0, 0.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let u = [1u8, 0, 0, 1, 1];
        let mut p = vec![0.3, 0.8, 0.05, 0.6, 0.99];
        let (_, g) = bce_loss(&p, &u, 2).unwrap();
        let cfg = GradCheck { epsilon: 1e-7, ..GradCheck::default() };
        let err = grad_check(&mut p, &g, cfg, |t| bce_loss(t, &u, 2).unwrap().0).unwrap();
        assert!(err < 1e-6, "{err}");
        let (_, g) = mse_loss(&p, &u, 2).unwrap();
        let err = grad_check(&mut p, &g, cfg, |t| mse_loss(t, &u, 2).unwrap().0).unwrap();
        assert!(err < 1e-6, "{err}");
        let mut s = vec![-3.0, 0.2, 5.0, -0.1, 1.5];
        let (_, g) = bce_with_logits(&s, &u, 3).unwrap();
        let err = grad_check(&mut s, &g, cfg, |t| bce_with_logits(t, &u, 3).unwrap().0).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let u = [1u8, 0, 1, 0];
        let s = [-2.0f64, 0.7, 3.0, -0.4];
        let p: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
        let a = bce_with_logits(&s, &u, 1).unwrap().0;
        let b = bce_loss(&p, &u, 1).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
            let u: Vec<u8> = (0..p.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            prop_assert!(bce_loss(&p, &u, 1).unwrap().0 >= 0.0);
            prop_assert!(mse_loss(&p, &u, 1).unwrap().0 >= 0.0);
        }
    }
}
