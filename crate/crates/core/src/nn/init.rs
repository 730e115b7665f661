use rand::Rng;

use super::tensor::{Real, Tensor};

/// Glorot (Xavier) uniform initialization: values drawn uniformly from
/// `±sqrt(6 / (fan_in + fan_out))`. A matrix `[fan_in, fan_out]` uses its two
/// dimensions; a vector uses its length for both.
pub fn glorot_init<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let bound = glorot_bound(shape);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [rest @ .., out] => (rest.iter().product(), *out),
    };
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_bound_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = glorot_init(&[10, 30], &mut rng);
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let again: Tensor<f64> = glorot_init(&[10, 30], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t, again);
    }

    #[test]
    fn empirical_variance() {
        let (fan_in, fan_out) = (200, 500);
        let t: Tensor<f64> = glorot_init(&[fan_in, fan_out], &mut ChaCha8Rng::seed_from_u64(2));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fan_in + fan_out) as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }
}
