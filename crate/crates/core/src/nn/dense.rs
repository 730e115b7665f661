//! Fully connected layer `y = act(x W + b)` over row-major batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::glorot_init;
use super::tensor::{gemm, MatRef, Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    /// Exponential linear unit with alpha = 1.
    Elu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Linear => x,
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Elu => {
                if y > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[inputs, outputs]`
    pub w: Tensor<T>,
    /// `[outputs]`
    pub b: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> DenseParams<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            w: Tensor::zeros(&[inputs, outputs]),
            b: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            w: glorot_init(&[inputs, outputs], rng),
            b: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Vec<T>,
    output: Vec<T>,
    rows: usize,
}

/// Forward pass over `x` of shape `[rows, inputs]`.
pub fn dense_forward<T: Real>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
) -> Result<(Tensor<T>, DenseCache<T>), NnError> {
    let (rows, inputs) = x.dims2()?;
    if inputs != p.inputs() {
        return Err(NnError::Shape(format!(
            "dense layer expects {} inputs, got {inputs}",
            p.inputs()
        )));
    }
    let out_w = p.outputs();
    let mut y = vec![T::zero(); rows * out_w];
    for row in y.chunks_exact_mut(out_w) {
        row.copy_from_slice(p.b.data());
    }
    gemm(
        T::one(),
        MatRef::new(x.data(), rows, inputs),
        MatRef::new(p.w.data(), inputs, out_w),
        T::one(),
        &mut y,
        out_w,
    );
    if p.activation != Activation::Linear {
        for v in &mut y {
            *v = p.activation.apply(*v);
        }
    }
    let cache = DenseCache {
        input: x.data().to_vec(),
        output: y.clone(),
        rows,
    };
    Ok((Tensor::from_vec(&[rows, out_w], y)?, cache))
}

/// Returns the input gradient and the parameter gradients.
pub fn dense_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &DenseCache<T>,
    p: &DenseParams<T>,
) -> Result<(Tensor<T>, DenseParams<T>), NnError> {
    let (rows, out_w) = grad_out.dims2()?;
    if rows != cache.rows || out_w != p.outputs() {
        return Err(NnError::Shape(format!(
            "dense gradient of shape {:?} does not match cached [{}, {}]",
            grad_out.shape(),
            cache.rows,
            p.outputs()
        )));
    }
    let inputs = p.inputs();
    let dpre: Vec<T> = if p.activation == Activation::Linear {
        grad_out.data().to_vec()
    } else {
        grad_out
            .data()
            .iter()
            .zip(&cache.output)
            .map(|(&g, &y)| g * p.activation.derivative_from_output(y))
            .collect()
    };
    let mut grads = DenseParams::zeros(inputs, out_w, p.activation);
    gemm(
        T::one(),
        MatRef::new(&cache.input, rows, inputs).t(),
        MatRef::new(&dpre, rows, out_w),
        T::zero(),
        grads.w.data_mut(),
        out_w,
    );
    let db = grads.b.data_mut();
    for row in dpre.chunks_exact(out_w) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut dx = vec![T::zero(); rows * inputs];
    gemm(
        T::one(),
        MatRef::new(&dpre, rows, out_w),
        MatRef::new(p.w.data(), inputs, out_w).t(),
        T::zero(),
        &mut dx,
        inputs,
    );
    Ok((Tensor::from_vec(&[rows, inputs], dx)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn trivial_forwards() {
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.2]).unwrap();
        let p = DenseParams::<f64>::zeros(3, 4, Activation::Elu);
        let (y, _) = dense_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut p = DenseParams::<f64>::zeros(3, 3, Activation::Linear);
        for i in 0..3 {
            p.w.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(dense_forward(&x, &p).unwrap().0, x);

        let p = DenseParams::<f64>::zeros(3, 1, Activation::Sigmoid);
        let (y, _) = dense_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));

        assert!(dense_forward(&x, &DenseParams::<f64>::zeros(2, 1, Activation::Tanh)).is_err());
    }

    #[test]
    fn linear_backward_is_grad_times_w_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[4, 3], &mut rng);
        let p = DenseParams {
            w: random_tensor(&[3, 2], &mut rng),
            b: random_tensor(&[2], &mut rng),
            activation: Activation::Linear,
        };
        let (_, cache) = dense_forward(&x, &p).unwrap();
        let g = random_tensor(&[4, 2], &mut rng);
        let (dx, _) = dense_backward(&g, &cache, &p).unwrap();
        for r in 0..4 {
            for i in 0..3 {
                let expected: f64 = (0..2).map(|o| g.data()[r * 2 + o] * p.w.data()[i * 2 + o]).sum();
                assert!((dx.data()[r * 3 + i] - expected).abs() < 1e-14);
            }
        }
        let zero = Tensor::zeros(&[4, 2]);
        let (_, grads) = dense_backward(&zero, &cache, &p).unwrap();
        assert!(grads.w.data().iter().chain(grads.b.data()).all(|&v| v == 0.0));
        assert!(dense_backward(&Tensor::zeros(&[3, 2]), &cache, &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (case, act) in [Activation::Linear, Activation::Elu, Activation::Sigmoid, Activation::Tanh]
            .into_iter()
            .enumerate()
        {
            let rows = 2 + case;
            let (inp, out) = (3 + case % 2, 2 + case);
            let x = random_tensor(&[rows, inp], &mut rng);
            let p = DenseParams {
                w: random_tensor(&[inp, out], &mut rng),
                b: random_tensor(&[out], &mut rng),
                activation: act,
            };
            let proj = random_tensor(&[rows, out], &mut rng);
            let loss = |p: &DenseParams<f64>, x: &Tensor<f64>| {
                let (y, _) = dense_forward(x, p).unwrap();
                y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = dense_forward(&x, &p).unwrap();
            let (dx, grads) = dense_backward(&proj, &cache, &p).unwrap();

            let mut theta: Vec<f64> = p.w.data().iter().chain(p.b.data()).copied().collect();
            let analytic: Vec<f64> = grads.w.data().iter().chain(grads.b.data()).copied().collect();
            let nw = p.w.len();
            let err = grad_check(&mut theta, &analytic, GradCheck::default(), |t| {
                let mut q = p.clone();
                q.w.data_mut().copy_from_slice(&t[..nw]);
                q.b.data_mut().copy_from_slice(&t[nw..]);
                loss(&q, &x)
            })
            .unwrap();
            let bound = if act == Activation::Linear { 1e-8 } else { 1e-5 };
            assert!(err < bound, "{act:?} params: {err}");

            let mut xs = x.data().to_vec();
            let err = grad_check(&mut xs, dx.data(), GradCheck::default(), |t| {
                loss(&p, &Tensor::from_vec(&[rows, inp], t.to_vec()).unwrap())
            })
            .unwrap();
            assert!(err < bound, "{act:?} inputs: {err}");
        }
    }
}
