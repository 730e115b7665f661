//! Gated recurrent unit layer with full backpropagation through time.
//!
//! Gate convention (reset applied before the recurrent candidate matrix):
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * h + z * n
//! ```
//!
//! Weights are packed column-wise as `[z | r | n]`: `w_x` is `[D, 3H]`,
//! `w_h` is `[H, 3H]`, `b` is `[3H]`. Sequences are time-major,
//! `[steps, batch, width]`.

use rand::Rng;

use super::dense::sigmoid;
use super::init::glorot_init;
use super::tensor::{gemm, MatRef, Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[input, 3 * hidden]),
            w_h: Tensor::zeros(&[hidden, 3 * hidden]),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: glorot_init(&[input, 3 * hidden], rng),
            w_h: glorot_init(&[hidden, 3 * hidden], rng),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[0]
    }
}

/// Activations saved by [`gru_forward_seq`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    steps: usize,
    batch: usize,
    x: Vec<T>,
    h0: Vec<T>,
    h: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    rh: Vec<T>,
}

impl<T> GruCache<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output sequence `[steps, batch, H]`.
    pub fn outputs(&self) -> &[T] {
        &self.h
    }
}

/// Runs the layer over a time-major batch `x` (`[steps, batch, D]`) from the
/// initial state `h0` (`[batch, H]`). Returns the state sequence.
pub fn gru_forward_seq<T: Real>(
    x: &[T],
    steps: usize,
    batch: usize,
    h0: &[T],
    p: &GruParams<T>,
) -> Result<(Vec<T>, GruCache<T>), NnError> {
    let d = p.input_width();
    let hw = p.hidden();
    let g = 3 * hw;
    if x.len() != steps * batch * d {
        return Err(NnError::Shape(format!(
            "GRU input has {} values, expected {steps}x{batch}x{d}",
            x.len()
        )));
    }
    if h0.len() != batch * hw {
        return Err(NnError::Shape(format!(
            "GRU initial state has {} values, expected {batch}x{hw}",
            h0.len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite("GRU input".into()));
    }
    let rows = steps * batch;
    let sb = batch * hw;

    // input contributions for all steps at once
    let mut gx = vec![T::zero(); rows * g];
    for row in gx.chunks_exact_mut(g) {
        row.copy_from_slice(p.b.data());
    }
    gemm(
        T::one(),
        MatRef::new(x, rows, d),
        MatRef::new(p.w_x.data(), d, g),
        T::one(),
        &mut gx,
        g,
    );

    let wh = p.w_h.data();
    let wh_zr = MatRef::strided(wh, hw, 2 * hw, g, 1);
    let wh_n = MatRef::strided(&wh[2 * hw..], hw, hw, g, 1);

    let mut h = vec![T::zero(); rows * hw];
    let mut z = vec![T::zero(); rows * hw];
    let mut r = vec![T::zero(); rows * hw];
    let mut n = vec![T::zero(); rows * hw];
    let mut rh = vec![T::zero(); rows * hw];
    let mut gh_zr = vec![T::zero(); batch * 2 * hw];
    let mut gh_n = vec![T::zero(); sb];

    for t in 0..steps {
        let (done, rest) = h.split_at_mut(t * sb);
        let hp: &[T] = if t == 0 { h0 } else { &done[(t - 1) * sb..] };
        let ht = &mut rest[..sb];
        let span = t * sb..(t + 1) * sb;

        gemm(T::one(), MatRef::new(hp, batch, hw), wh_zr, T::zero(), &mut gh_zr, 2 * hw);
        let (zt, rt, rht) = (&mut z[span.clone()], &mut r[span.clone()], &mut rh[span.clone()]);
        for bi in 0..batch {
            let gxr = &gx[(t * batch + bi) * g..];
            let ghr = &gh_zr[bi * 2 * hw..];
            for j in 0..hw {
                let k = bi * hw + j;
                zt[k] = sigmoid(gxr[j] + ghr[j]);
                rt[k] = sigmoid(gxr[hw + j] + ghr[hw + j]);
                rht[k] = rt[k] * hp[k];
            }
        }
        gemm(T::one(), MatRef::new(rht, batch, hw), wh_n, T::zero(), &mut gh_n, hw);
        let nt = &mut n[span];
        for bi in 0..batch {
            let gxr = &gx[(t * batch + bi) * g + 2 * hw..];
            for j in 0..hw {
                let k = bi * hw + j;
                nt[k] = (gxr[j] + gh_n[k]).tanh();
                ht[k] = hp[k] + zt[k] * (nt[k] - hp[k]);
            }
        }
    }

    let cache = GruCache {
        steps,
        batch,
        x: x.to_vec(),
        h0: h0.to_vec(),
        h: h.clone(),
        z,
        r,
        n,
        rh,
    };
    Ok((h, cache))
}

/// Gradients of one backward pass through a GRU layer.
#[derive(Debug, Clone)]
pub struct GruGrads<T> {
    pub x: Vec<T>,
    pub h0: Vec<T>,
    pub params: GruParams<T>,
}

/// Backpropagation through all cached steps. `grad_h` holds the loss
/// gradient with respect to every output state, `[steps, batch, H]`.
pub fn gru_backward_seq<T: Real>(
    grad_h: &[T],
    cache: &GruCache<T>,
    p: &GruParams<T>,
) -> Result<GruGrads<T>, NnError> {
    let (steps, batch) = (cache.steps, cache.batch);
    let d = p.input_width();
    let hw = p.hidden();
    let g = 3 * hw;
    let rows = steps * batch;
    let sb = batch * hw;
    if grad_h.len() != rows * hw || cache.h.len() != rows * hw || cache.x.len() != rows * d {
        return Err(NnError::Shape(format!(
            "GRU gradient has {} values, expected {steps}x{batch}x{hw}",
            grad_h.len()
        )));
    }

    let wh = p.w_h.data();
    let wh_zr_t = MatRef::strided(wh, hw, 2 * hw, g, 1).t();
    let wh_n_t = MatRef::strided(&wh[2 * hw..], hw, hw, g, 1).t();

    // pre-activation gradients [steps, batch, 3H]
    let mut da = vec![T::zero(); rows * g];
    let mut dh = vec![T::zero(); sb];
    let mut dhp = vec![T::zero(); sb];
    let mut dn_pre = vec![T::zero(); sb];
    let mut drh = vec![T::zero(); sb];

    for t in (0..steps).rev() {
        let span = t * sb..(t + 1) * sb;
        let hp: &[T] = if t == 0 {
            &cache.h0
        } else {
            &cache.h[(t - 1) * sb..t * sb]
        };
        let (zt, rt, nt) = (&cache.z[span.clone()], &cache.r[span.clone()], &cache.n[span.clone()]);
        for (acc, &gh) in dh.iter_mut().zip(&grad_h[span.clone()]) {
            *acc += gh;
        }
        for bi in 0..batch {
            let dar = &mut da[(t * batch + bi) * g..(t * batch + bi + 1) * g];
            for j in 0..hw {
                let k = bi * hw + j;
                let (zk, nk, hk, dk) = (zt[k], nt[k], hp[k], dh[k]);
                let dn = dk * zk;
                let dz = dk * (nk - hk);
                dhp[k] = dk * (T::one() - zk);
                let dan = dn * (T::one() - nk * nk);
                dn_pre[k] = dan;
                dar[2 * hw + j] = dan;
                dar[j] = dz * zk * (T::one() - zk);
            }
        }
        gemm(T::one(), MatRef::new(&dn_pre, batch, hw), wh_n_t, T::zero(), &mut drh, hw);
        for bi in 0..batch {
            let dar = &mut da[(t * batch + bi) * g..];
            for j in 0..hw {
                let k = bi * hw + j;
                let rk = rt[k];
                let dr = drh[k] * hp[k];
                dhp[k] += drh[k] * rk;
                dar[hw + j] = dr * rk * (T::one() - rk);
            }
        }
        let da_zr = MatRef::strided(&da[t * batch * g..], batch, 2 * hw, g, 1);
        gemm(T::one(), da_zr, wh_zr_t, T::one(), &mut dhp, hw);
        std::mem::swap(&mut dh, &mut dhp);
    }

    let mut grads = GruParams::zeros(d, hw);
    // recurrent weights: previous state against z|r, gated state against n
    {
        let dwh = grads.w_h.data_mut();
        if steps > 0 {
            gemm(
                T::one(),
                MatRef::new(&cache.h0, batch, hw).t(),
                MatRef::strided(&da, batch, 2 * hw, g, 1),
                T::zero(),
                dwh,
                g,
            );
        }
        if steps > 1 {
            let prev_rows = (steps - 1) * batch;
            gemm(
                T::one(),
                MatRef::new(&cache.h[..prev_rows * hw], prev_rows, hw).t(),
                MatRef::strided(&da[batch * g..], prev_rows, 2 * hw, g, 1),
                T::one(),
                dwh,
                g,
            );
        }
        gemm(
            T::one(),
            MatRef::new(&cache.rh, rows, hw).t(),
            MatRef::strided(&da[2 * hw..], rows, hw, g, 1),
            T::zero(),
            &mut dwh[2 * hw..],
            g,
        );
    }
    gemm(
        T::one(),
        MatRef::new(&cache.x, rows, d).t(),
        MatRef::new(&da, rows, g),
        T::zero(),
        grads.w_x.data_mut(),
        g,
    );
    let db = grads.b.data_mut();
    for row in da.chunks_exact(g) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![T::zero(); rows * d];
    gemm(
        T::one(),
        MatRef::new(&da, rows, g),
        MatRef::new(p.w_x.data(), d, g).t(),
        T::zero(),
        &mut dx,
        d,
    );
    Ok(GruGrads {
        x: dx,
        h0: dh,
        params: grads,
    })
}

/// Single-sequence (or batched) forward over tensors. `x_seq` is `[T, D]`
/// or `[T, B, D]`, `h0` is `[H]` or `[B, H]`; the result mirrors the input
/// rank.
pub fn gru_forward<T: Real>(
    x_seq: &Tensor<T>,
    h0: &Tensor<T>,
    p: &GruParams<T>,
) -> Result<(Tensor<T>, GruCache<T>), NnError> {
    let (steps, batch, shape): (usize, usize, Vec<usize>) = match x_seq.shape() {
        &[t, _] => (t, 1, vec![t, p.hidden()]),
        &[t, b, _] => (t, b, vec![t, b, p.hidden()]),
        s => return Err(NnError::Shape(format!("GRU input must be rank 2 or 3, got {s:?}"))),
    };
    if *x_seq.shape().last().unwrap() != p.input_width() {
        return Err(NnError::Shape(format!(
            "GRU expects input width {}, got {:?}",
            p.input_width(),
            x_seq.shape()
        )));
    }
    let (h, cache) = gru_forward_seq(x_seq.data(), steps, batch, h0.data(), p)?;
    Ok((Tensor::from_vec(&shape, h)?, cache))
}

/// Tensor form of [`gru_backward_seq`]: `(grad_x_seq, grad_h0, grad_params)`.
pub fn gru_backward<T: Real>(
    grad_hseq: &Tensor<T>,
    cache: &GruCache<T>,
    p: &GruParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, GruParams<T>), NnError> {
    let grads = gru_backward_seq(grad_hseq.data(), cache, p)?;
    let mut x_shape = grad_hseq.shape().to_vec();
    *x_shape.last_mut().unwrap() = p.input_width();
    let h0_shape: Vec<usize> = if grad_hseq.shape().len() == 3 {
        vec![cache.batch, p.hidden()]
    } else {
        vec![p.hidden()]
    };
    Ok((
        Tensor::from_vec(&x_shape, grads.x)?,
        Tensor::from_vec(&h0_shape, grads.h0)?,
        grads.params,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn random_params(d: usize, h: usize, rng: &mut ChaCha8Rng) -> GruParams<f64> {
        GruParams {
            w_x: Tensor::from_vec(&[d, 3 * h], random_vec(d * 3 * h, 0.8, rng)).unwrap(),
            w_h: Tensor::from_vec(&[h, 3 * h], random_vec(h * 3 * h, 0.8, rng)).unwrap(),
            b: Tensor::from_vec(&[3 * h], random_vec(3 * h, 0.5, rng)).unwrap(),
        }
    }

    fn flatten(p: &GruParams<f64>) -> Vec<f64> {
        p.w_x.data().iter().chain(p.w_h.data()).chain(p.b.data()).copied().collect()
    }

    fn unflatten(p: &GruParams<f64>, theta: &[f64]) -> GruParams<f64> {
        let mut q = p.clone();
        let (a, rest) = theta.split_at(p.w_x.len());
        let (b, c) = rest.split_at(p.w_h.len());
        q.w_x.data_mut().copy_from_slice(a);
        q.w_h.data_mut().copy_from_slice(b);
        q.b.data_mut().copy_from_slice(c);
        q
    }

    #[test]
    fn zero_params_halve_the_state() {
        let p = GruParams::<f64>::zeros(2, 3);
        let x = Tensor::from_vec(&[4, 2], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.7, 1.1]).unwrap();
        let h0 = Tensor::from_vec(&[3], vec![0.8, -0.4, 0.2]).unwrap();
        let (h, _) = gru_forward(&x, &h0, &p).unwrap();
        let mut expected = h0.data().to_vec();
        for t in 0..4 {
            for v in &mut expected {
                *v *= 0.5;
            }
            assert_eq!(&h.data()[t * 3..(t + 1) * 3], &expected[..]);
        }
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(2, 4, &mut rng);
        p.b.fill(0.0);
        let (h, _) = gru_forward(&Tensor::zeros(&[6, 2]), &Tensor::zeros(&[4]), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_scalar_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(2, 2, &mut rng);
        let x = [0.7, -0.3];
        let h0 = [0.25, -0.6];
        let (h, _) = gru_forward_seq(&x, 1, 1, &h0, &p).unwrap();
        let wx = |i: usize, c: usize| p.w_x.data()[i * 6 + c];
        let wh = |i: usize, c: usize| p.w_h.data()[i * 6 + c];
        let b = |c: usize| p.b.data()[c];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let z = sig(wx(0, j) * x[0] + wx(1, j) * x[1] + wh(0, j) * h0[0] + wh(1, j) * h0[1] + b(j));
            let r: Vec<f64> = (0..2)
                .map(|m| {
                    sig(wx(0, 2 + m) * x[0] + wx(1, 2 + m) * x[1] + wh(0, 2 + m) * h0[0] + wh(1, 2 + m) * h0[1] + b(2 + m))
                })
                .collect();
            let n = (wx(0, 4 + j) * x[0]
                + wx(1, 4 + j) * x[1]
                + wh(0, 4 + j) * r[0] * h0[0]
                + wh(1, 4 + j) * r[1] * h0[1]
                + b(4 + j))
            .tanh();
            let expected = (1.0 - z) * h0[j] + z * n;
            assert!((h[j] - expected).abs() < 1e-14);
        }
    }

    fn check_gradients(steps: usize, batch: usize, d: usize, hw: usize, seed: u64) -> (f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(d, hw, &mut rng);
        let x = random_vec(steps * batch * d, 1.0, &mut rng);
        let h0 = random_vec(batch * hw, 0.9, &mut rng);
        let proj = random_vec(steps * batch * hw, 1.0, &mut rng);
        let loss = |p: &GruParams<f64>, x: &[f64], h0: &[f64]| {
            let (h, _) = gru_forward_seq(x, steps, batch, h0, p).unwrap();
            h.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = gru_forward_seq(&x, steps, batch, &h0, &p).unwrap();
        let grads = gru_backward_seq(&proj, &cache, &p).unwrap();
        let cfg = GradCheck::default();
        let mut theta = flatten(&p);
        let e_params = grad_check(&mut theta, &flatten(&grads.params), cfg, |t| {
            loss(&unflatten(&p, t), &x, &h0)
        })
        .unwrap();
        let mut xs = x.clone();
        let e_x = grad_check(&mut xs, &grads.x, cfg, |t| loss(&p, t, &h0)).unwrap();
        let mut hs = h0.clone();
        let e_h0 = grad_check(&mut hs, &grads.h0, cfg, |t| loss(&p, &x, t)).unwrap();
        (e_params, e_x, e_h0)
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let (a, b, c) = check_gradients(7, 1, 3, 5, 11);
        assert!(a < 1e-4 && b < 1e-4 && c < 1e-4, "{a} {b} {c}");
        let (a, b, c) = check_gradients(5, 3, 2, 4, 12);
        assert!(a < 1e-4 && b < 1e-4 && c < 1e-4, "{a} {b} {c}");
    }

    #[test]
    fn single_step_gradients() {
        let (a, b, c) = check_gradients(1, 2, 3, 3, 13);
        assert!(a < 1e-4 && b < 1e-4 && c < 1e-4, "{a} {b} {c}");
    }

    #[test]
    fn initial_state_gradient_is_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_params(2, 3, &mut rng);
        let x = random_vec(6 * 2, 1.0, &mut rng);
        let h0 = vec![0.1, -0.2, 0.3];
        let (_, cache) = gru_forward_seq(&x, 6, 1, &h0, &p).unwrap();
        // loss only on the last state
        let mut gh = vec![0.0; 18];
        gh[15..].fill(1.0);
        let grads = gru_backward_seq(&gh, &cache, &p).unwrap();
        assert!(grads.h0.iter().any(|v| v.abs() > 1e-6));
        let fd = {
            let eps = 1e-6;
            let f = |h: &[f64]| gru_forward_seq(&x, 6, 1, h, &p).unwrap().0[15..].iter().sum::<f64>();
            let mut hp = h0.clone();
            hp[0] += eps;
            let mut hm = h0.clone();
            hm[0] -= eps;
            (f(&hp) - f(&hm)) / (2.0 * eps)
        };
        assert_eq!(fd.signum(), grads.h0[0].signum());
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let p = GruParams::<f64>::zeros(2, 3);
        assert!(gru_forward_seq(&[0.0; 5], 2, 1, &[0.0; 3], &p).is_err());
        assert!(gru_forward_seq(&[0.0; 4], 2, 1, &[0.0; 2], &p).is_err());
        assert!(matches!(
            gru_forward_seq(&[0.0, f64::NAN, 0.0, 0.0], 2, 1, &[0.0; 3], &p),
            Err(NnError::NonFinite(_))
        ));
        let (_, cache) = gru_forward_seq(&[0.0; 4], 2, 1, &[0.0; 3], &p).unwrap();
        assert!(gru_backward_seq(&[0.0; 5], &cache, &p).is_err());
        assert!(gru_forward(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3]), &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn states_stay_bounded(seed in any::<u64>(), steps in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_params(2, 4, &mut rng);
            for v in p.w_x.data_mut().iter_mut().chain(p.w_h.data_mut()) {
                *v *= 5.0;
            }
            let x = random_vec(steps * 2, 10.0, &mut rng);
            let h0 = random_vec(4, 1.0, &mut rng);
            let (h, _) = gru_forward_seq(&x, steps, 1, &h0, &p).unwrap();
            prop_assert!(h.iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn random_shapes_pass_gradient_check(seed in any::<u64>(), steps in 1usize..6, batch in 1usize..3, d in 1usize..4, hw in 1usize..5) {
            let (a, b, c) = check_gradients(steps, batch, d, hw, seed);
            prop_assert!(a < 1e-4 && b < 1e-4 && c < 1e-4, "{} {} {}", a, b, c);
        }
    }
}
