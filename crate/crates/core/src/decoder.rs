//! Bidirectional GRU decoder over fixed-length observation windows.
//!
//! A window holds `2 * ramp_len + loss_depth` steps of two real observations
//! each. A forward stack runs over the window in time order and a separate
//! backward stack over the reversed window; for every step outside the two
//! ramps the top states of both stacks are concatenated and passed through
//! an ELU combiner and a single sigmoid output unit.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv_code::CodeSpec;
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, Manifest};
use crate::nn::dense::{dense_backward, dense_forward, sigmoid, Activation, DenseCache, DenseParams};
use crate::nn::gru::{gru_backward_seq, gru_forward_seq, GruCache, GruParams};
use crate::nn::{NnError, Real, Tensor};

/// Observation reals per decoded bit.
pub const INPUT_WIDTH: usize = 2;

/// Windows evaluated together by [`predict_stream`].
const STREAM_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty observation stream")]
    Empty,
    #[error("checkpoint does not match the decoder configuration: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub ramp_len: usize,
    pub loss_depth: usize,
    pub gru_layers: usize,
    pub gru_width: usize,
    pub combiner_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            ramp_len: 15,
            loss_depth: 15,
            gru_layers: 3,
            gru_width: 256,
            combiner_width: 16,
        }
    }
}

impl DecoderConfig {
    /// Full-size decoder with both ramp and loss depth set to the code's
    /// traceback length.
    pub fn for_code(code: &CodeSpec) -> Self {
        Self {
            ramp_len: code.traceback_hint(),
            loss_depth: code.traceback_hint(),
            ..Self::default()
        }
    }

    pub fn window_len(&self) -> usize {
        2 * self.ramp_len + self.loss_depth
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: &str| Err(DecoderError::Config(m.into()));
        if self.loss_depth == 0 {
            return bad("loss_depth must be at least 1");
        }
        if self.gru_layers == 0 {
            return bad("gru_layers must be at least 1");
        }
        if self.gru_width == 0 {
            return bad("gru_width must be at least 1");
        }
        if self.combiner_width == 0 {
            return bad("combiner_width must be at least 1");
        }
        Ok(())
    }
}

/// All trainable tensors. The same layout carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub fwd: Vec<GruParams<T>>,
    pub bwd: Vec<GruParams<T>>,
    pub combiner: DenseParams<T>,
    /// Pre-sigmoid output unit.
    pub head: DenseParams<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let stack = || {
            (0..cfg.gru_layers)
                .map(|l| GruParams::zeros(layer_input(cfg, l), cfg.gru_width))
                .collect()
        };
        Self {
            fwd: stack(),
            bwd: stack(),
            combiner: DenseParams::zeros(2 * cfg.gru_width, cfg.combiner_width, Activation::Elu),
            head: DenseParams::zeros(cfg.combiner_width, 1, Activation::Linear),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let fwd = (0..cfg.gru_layers)
            .map(|l| GruParams::init(layer_input(cfg, l), cfg.gru_width, rng))
            .collect();
        let bwd = (0..cfg.gru_layers)
            .map(|l| GruParams::init(layer_input(cfg, l), cfg.gru_width, rng))
            .collect();
        Self {
            fwd,
            bwd,
            combiner: DenseParams::init(2 * cfg.gru_width, cfg.combiner_width, Activation::Elu, rng),
            head: DenseParams::init(cfg.combiner_width, 1, Activation::Linear, rng),
        }
    }

    /// Named views in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (dir, stack) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (l, p) in stack.iter().enumerate() {
                out.push((format!("{dir}.{l}.w_x"), &p.w_x));
                out.push((format!("{dir}.{l}.w_h"), &p.w_h));
                out.push((format!("{dir}.{l}.b"), &p.b));
            }
        }
        out.push(("combiner.w".into(), &self.combiner.w));
        out.push(("combiner.b".into(), &self.combiner.b));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for stack in [&mut self.fwd, &mut self.bwd] {
            for p in stack.iter_mut() {
                out.push(&mut p.w_x);
                out.push(&mut p.w_h);
                out.push(&mut p.b);
            }
        }
        out.push(&mut self.combiner.w);
        out.push(&mut self.combiner.b);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.named().into_iter().map(|(_, t)| t.data()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut().into_iter().map(|t| t.data_mut()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let gru = |p: &GruParams<T>| GruParams {
            w_x: p.w_x.cast(),
            w_h: p.w_h.cast(),
            b: p.b.cast(),
        };
        let dense = |p: &DenseParams<T>| DenseParams {
            w: p.w.cast(),
            b: p.b.cast(),
            activation: p.activation,
        };
        ModelParams {
            fwd: self.fwd.iter().map(gru).collect(),
            bwd: self.bwd.iter().map(gru).collect(),
            combiner: dense(&self.combiner),
            head: dense(&self.head),
        }
    }

    /// The mirror-image model: direction stacks swapped and the combiner's
    /// input halves exchanged to match. Evaluated on a reversed window it
    /// yields the original outputs in reverse order.
    pub fn time_reversed(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.fwd, &mut out.bwd);
        let (inputs, width) = (self.combiner.inputs(), self.combiner.outputs());
        let h = inputs / 2;
        let src = self.combiner.w.data();
        let dst = out.combiner.w.data_mut();
        for i in 0..inputs {
            let j = if i < h { i + h } else { i - h };
            dst[j * width..(j + 1) * width].copy_from_slice(&src[i * width..(i + 1) * width]);
        }
        out
    }

    /// Errors if any tensor shape differs from what `cfg` implies.
    pub fn check_config(&self, cfg: &DecoderConfig) -> Result<(), DecoderError> {
        let expected = ModelParams::<T>::zeros(cfg);
        let have = self.named();
        let want = expected.named();
        if have.len() != want.len() {
            return Err(DecoderError::Incompatible(format!(
                "{} tensors, configuration needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, a), (_, b)) in have.iter().zip(&want) {
            if a.shape() != b.shape() {
                return Err(DecoderError::Incompatible(format!(
                    "`{name}` has shape {:?}, configuration needs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn layer_input(cfg: &DecoderConfig, layer: usize) -> usize {
    if layer == 0 {
        INPUT_WIDTH
    } else {
        cfg.gru_width
    }
}

/// One observation window, `[window_len, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub observations: Tensor<f32>,
}

impl SampleWindow {
    pub fn new(cfg: &DecoderConfig, obs: &[[f64; 2]]) -> Result<Self, DecoderError> {
        if obs.len() != cfg.window_len() {
            return Err(DecoderError::Shape(format!(
                "window has {} steps, configuration needs {}",
                obs.len(),
                cfg.window_len()
            )));
        }
        if !obs.iter().flatten().all(|v| v.is_finite()) {
            return Err(DecoderError::Nn(NnError::NonFinite("window observations".into())));
        }
        let data = obs.iter().flat_map(|o| [o[0] as f32, o[1] as f32]).collect();
        Ok(Self {
            observations: Tensor::from_vec(&[obs.len(), INPUT_WIDTH], data)?,
        })
    }
}

/// `p_hat[k]` estimates `P(u_k = 1)` for the decided positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOutput {
    pub p_hat: Vec<f64>,
}

/// A batch of windows stored time-major, `[steps, batch, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T> {
    pub steps: usize,
    pub batch: usize,
    pub data: Vec<T>,
}

impl<T: Real> WindowBatch<T> {
    pub fn zeros(steps: usize, batch: usize) -> Self {
        Self {
            steps,
            batch,
            data: vec![T::zero(); steps * batch * INPUT_WIDTH],
        }
    }

    pub fn set(&mut self, window: usize, step: usize, obs: [T; 2]) {
        let at = (step * self.batch + window) * INPUT_WIDTH;
        self.data[at..at + INPUT_WIDTH].copy_from_slice(&obs);
    }

    pub fn get(&self, window: usize, step: usize) -> [T; 2] {
        let at = (step * self.batch + window) * INPUT_WIDTH;
        [self.data[at], self.data[at + 1]]
    }

    pub fn from_windows(windows: &[SampleWindow]) -> Result<Self, DecoderError> {
        let steps = windows.first().ok_or(DecoderError::Empty)?.observations.shape()[0];
        let mut b = Self::zeros(steps, windows.len());
        for (w, win) in windows.iter().enumerate() {
            if win.observations.shape() != [steps, INPUT_WIDTH] {
                return Err(DecoderError::Shape("windows of different lengths".into()));
            }
            for (t, o) in win.observations.data().chunks_exact(2).enumerate() {
                b.set(w, t, [T::lit(o[0] as f64), T::lit(o[1] as f64)]);
            }
        }
        Ok(b)
    }
}

/// Outputs of a batched forward pass, each `[batch, loss_depth]`.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    steps: usize,
    batch: usize,
    fwd: Vec<GruCache<T>>,
    bwd: Vec<GruCache<T>>,
    combiner: DenseCache<T>,
    head: DenseCache<T>,
}

fn reverse_steps<T: Copy>(x: &[T], steps: usize) -> Vec<T> {
    let row = x.len() / steps.max(1);
    let mut out = Vec::with_capacity(x.len());
    for t in (0..steps).rev() {
        out.extend_from_slice(&x[t * row..(t + 1) * row]);
    }
    out
}

fn run_stack<T: Real>(
    layers: &[GruParams<T>],
    x: Vec<T>,
    steps: usize,
    batch: usize,
) -> Result<(Vec<T>, Vec<GruCache<T>>), NnError> {
    let mut input = x;
    let mut caches = Vec::with_capacity(layers.len());
    for p in layers {
        let h0 = vec![T::zero(); batch * p.hidden()];
        let (h, cache) = gru_forward_seq(&input, steps, batch, &h0, p)?;
        caches.push(cache);
        input = h;
    }
    Ok((input, caches))
}

fn backprop_stack<T: Real>(
    layers: &[GruParams<T>],
    caches: &[GruCache<T>],
    grad_top: Vec<T>,
) -> Result<(Vec<T>, Vec<GruParams<T>>), NnError> {
    let mut g = grad_top;
    let mut grads = Vec::with_capacity(layers.len());
    for (p, cache) in layers.iter().zip(caches).rev() {
        let gg = gru_backward_seq(&g, cache, p)?;
        g = gg.x;
        grads.push(gg.params);
    }
    grads.reverse();
    Ok((g, grads))
}

/// Batched forward pass.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    cfg: &DecoderConfig,
    x: &WindowBatch<T>,
) -> Result<(BatchOutput<T>, ForwardCache<T>), DecoderError> {
    let (steps, batch) = (x.steps, x.batch);
    if steps != cfg.window_len() || x.data.len() != steps * batch * INPUT_WIDTH {
        return Err(DecoderError::Shape(format!(
            "batch of {steps} steps x {batch} windows ({} values), configuration needs {} steps",
            x.data.len(),
            cfg.window_len()
        )));
    }
    if batch == 0 {
        return Err(DecoderError::Empty);
    }
    let hw = cfg.gru_width;
    let (ramp, ld) = (cfg.ramp_len, cfg.loss_depth);

    let (top_f, fwd) = run_stack(&params.fwd, x.data.clone(), steps, batch)?;
    let (top_b, bwd) = run_stack(&params.bwd, reverse_steps(&x.data, steps), steps, batch)?;

    // ramp steps are dropped here, before the combiner
    let sb = batch * hw;
    let mut cat = vec![T::zero(); ld * batch * 2 * hw];
    for j in 0..ld {
        let t = ramp + j;
        let tr = steps - 1 - t;
        for b in 0..batch {
            let row = &mut cat[(j * batch + b) * 2 * hw..(j * batch + b + 1) * 2 * hw];
            row[..hw].copy_from_slice(&top_f[t * sb + b * hw..t * sb + (b + 1) * hw]);
            row[hw..].copy_from_slice(&top_b[tr * sb + b * hw..tr * sb + (b + 1) * hw]);
        }
    }
    let cat = Tensor::from_vec(&[ld * batch, 2 * hw], cat)?;
    let (mid, combiner) = dense_forward(&cat, &params.combiner)?;
    let (out, head) = dense_forward(&mid, &params.head)?;

    let mut logits = vec![T::zero(); batch * ld];
    for j in 0..ld {
        for b in 0..batch {
            logits[b * ld + j] = out.data()[j * batch + b];
        }
    }
    let probs = logits.iter().map(|&s| sigmoid(s)).collect();
    Ok((
        BatchOutput { logits, probs },
        ForwardCache {
            steps,
            batch,
            fwd,
            bwd,
            combiner,
            head,
        },
    ))
}

/// Backpropagates `grad_logits` (`[batch, loss_depth]`, with respect to the
/// pre-sigmoid outputs) through both stacks. Returns the parameter gradients
/// and the gradient with respect to the input batch.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &DecoderConfig,
    cache: &ForwardCache<T>,
    grad_logits: &[T],
) -> Result<(ModelParams<T>, Vec<T>), DecoderError> {
    let (steps, batch) = (cache.steps, cache.batch);
    let (ramp, ld, hw) = (cfg.ramp_len, cfg.loss_depth, cfg.gru_width);
    if grad_logits.len() != batch * ld || steps != cfg.window_len() {
        return Err(DecoderError::Shape(format!(
            "{} output gradients for {batch} windows of {ld} decisions",
            grad_logits.len()
        )));
    }
    let mut g_out = vec![T::zero(); ld * batch];
    for j in 0..ld {
        for b in 0..batch {
            g_out[j * batch + b] = grad_logits[b * ld + j];
        }
    }
    let g_out = Tensor::from_vec(&[ld * batch, 1], g_out)?;
    let (g_mid, head) = dense_backward(&g_out, &cache.head, &params.head)?;
    let (g_cat, combiner) = dense_backward(&g_mid, &cache.combiner, &params.combiner)?;

    let sb = batch * hw;
    let mut g_top_f = vec![T::zero(); steps * sb];
    let mut g_top_b = vec![T::zero(); steps * sb];
    for j in 0..ld {
        let t = ramp + j;
        let tr = steps - 1 - t;
        for b in 0..batch {
            let row = &g_cat.data()[(j * batch + b) * 2 * hw..(j * batch + b + 1) * 2 * hw];
            g_top_f[t * sb + b * hw..t * sb + (b + 1) * hw].copy_from_slice(&row[..hw]);
            g_top_b[tr * sb + b * hw..tr * sb + (b + 1) * hw].copy_from_slice(&row[hw..]);
        }
    }
    let (gx_f, fwd) = backprop_stack(&params.fwd, &cache.fwd, g_top_f)?;
    let (gx_b, bwd) = backprop_stack(&params.bwd, &cache.bwd, g_top_b)?;
    let mut gx = reverse_steps(&gx_b, steps);
    for (a, b) in gx.iter_mut().zip(&gx_f) {
        *a += *b;
    }
    Ok((
        ModelParams {
            fwd,
            bwd,
            combiner,
            head,
        },
        gx,
    ))
}

/// Soft output of a single window.
pub fn forward_window(
    params: &ModelParams<f32>,
    cfg: &DecoderConfig,
    window: &SampleWindow,
) -> Result<SoftOutput, DecoderError> {
    let batch = WindowBatch::from_windows(std::slice::from_ref(window))?;
    let (out, _) = forward(params, cfg, &batch)?;
    Ok(SoftOutput {
        p_hat: out.probs.iter().map(|&p| p as f64).collect(),
    })
}

/// `1` where `p > 0.5`, else `0`.
pub fn hard_decide<T: Real>(p_hat: &[T]) -> Vec<u8> {
    let half = T::lit(0.5);
    p_hat.iter().map(|&p| u8::from(p > half)).collect()
}

/// Probabilities for every step of an observation stream. The stream is
/// padded with `ramp_len` zero steps on both sides (plus zeros up to a
/// multiple of `loss_depth` at the end) and cut into windows advancing by
/// `loss_depth`.
pub fn predict_stream_soft(
    obs: &[[f64; 2]],
    params: &ModelParams<f32>,
    cfg: &DecoderConfig,
) -> Result<Vec<f32>, DecoderError> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(DecoderError::Empty);
    }
    let (ramp, ld, steps) = (cfg.ramp_len, cfg.loss_depth, cfg.window_len());
    let windows = obs.len().div_ceil(ld);
    let padded_len = 2 * ramp + windows * ld;
    let at = |i: usize| -> [f32; 2] {
        if i < ramp || i >= ramp + obs.len() {
            [0.0; 2]
        } else {
            let o = obs[i - ramp];
            [o[0] as f32, o[1] as f32]
        }
    };
    debug_assert!(padded_len >= steps);
    let mut out = Vec::with_capacity(windows * ld);
    let mut first = 0;
    while first < windows {
        let n = STREAM_CHUNK.min(windows - first);
        let mut batch = WindowBatch::zeros(steps, n);
        for w in 0..n {
            let start = (first + w) * ld;
            for t in 0..steps {
                batch.set(w, t, at(start + t));
            }
        }
        let (res, _) = forward(params, cfg, &batch)?;
        out.extend_from_slice(&res.probs);
        first += n;
    }
    out.truncate(obs.len());
    Ok(out)
}

/// Hard decisions for every step of an observation stream.
pub fn predict_stream(
    obs: &[[f64; 2]],
    params: &ModelParams<f32>,
    cfg: &DecoderConfig,
) -> Result<Vec<u8>, DecoderError> {
    Ok(hard_decide(&predict_stream_soft(obs, params, cfg)?))
}

/// Writes `<dir>/<stem>.json` + `.bin`; the decoder configuration and `meta`
/// go into the manifest.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    params: &ModelParams<f32>,
    cfg: &DecoderConfig,
    meta: serde_json::Value,
) -> Result<PathBuf, DecoderError> {
    let meta = serde_json::json!({ "decoder": cfg, "run": meta });
    Ok(write_checkpoint(dir, stem, &params.named(), meta)?)
}

/// Loads a checkpoint and checks every tensor against `cfg`.
pub fn load_checkpoint(
    path: &Path,
    cfg: &DecoderConfig,
) -> Result<(ModelParams<f32>, Manifest), DecoderError> {
    let (manifest, tensors) = read_checkpoint(path)?;
    let mut params = ModelParams::<f32>::zeros(cfg);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if tensors.len() != names.len() {
        return Err(DecoderError::Incompatible(format!(
            "checkpoint holds {} tensors, configuration needs {}",
            tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), (got_name, t)) in params.tensors_mut().into_iter().zip(&names).zip(tensors) {
        if *got_name != *name {
            return Err(DecoderError::Incompatible(format!(
                "expected tensor `{name}`, found `{got_name}`"
            )));
        }
        if t.shape() != slot.shape() {
            return Err(DecoderError::Incompatible(format!(
                "`{name}` has shape {:?}, configuration needs {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok((params, manifest))
}

/// Reads the decoder configuration stored in a checkpoint manifest, if any.
pub fn checkpoint_config(manifest: &Manifest) -> Option<DecoderConfig> {
    serde_json::from_value(manifest.meta.get("decoder")?.clone()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DecoderConfig {
        DecoderConfig {
            ramp_len: 3,
            loss_depth: 2,
            gru_layers: 2,
            gru_width: 8,
            combiner_width: 16,
        }
    }

    fn random_batch<T: Real>(cfg: &DecoderConfig, batch: usize, rng: &mut ChaCha8Rng) -> WindowBatch<T> {
        let mut x = WindowBatch::zeros(cfg.window_len(), batch);
        for v in &mut x.data {
            *v = T::lit(rng.random_range(-1.5..1.5));
        }
        x
    }

    fn perturbed<T: Real>(cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> ModelParams<T> {
        let mut p = ModelParams::<T>::init(cfg, rng);
        // nonzero biases so their gradients are exercised too
        for t in p.tensors_mut() {
            if t.shape().len() == 1 {
                for v in t.data_mut() {
                    *v = T::lit(rng.random_range(-0.3..0.3));
                }
            }
        }
        p
    }

    #[test]
    fn output_shape_and_zero_model() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch::<f32>(&cfg, 5, &mut rng);
        let (out, _) = forward(&ModelParams::zeros(&cfg), &cfg, &x).unwrap();
        assert_eq!(out.probs.len(), 5 * cfg.loss_depth);
        assert!(out.probs.iter().all(|&p| p == 0.5));
        let wrong = WindowBatch::<f32>::zeros(cfg.window_len() + 1, 5);
        assert!(forward(&ModelParams::zeros(&cfg), &cfg, &wrong).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(DecoderConfig { loss_depth: 0, ..small() }.validate().is_err());
        assert!(DecoderConfig { gru_layers: 0, ..small() }.validate().is_err());
        assert_eq!(DecoderConfig { ramp_len: 0, ..small() }.window_len(), 2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = perturbed::<f64>(&cfg, &mut rng);
        let x = random_batch::<f64>(&cfg, 3, &mut rng);
        let proj: Vec<f64> = (0..3 * cfg.loss_depth).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &ModelParams<f64>, x: &WindowBatch<f64>| {
            let (out, _) = forward(p, &cfg, x).unwrap();
            out.logits.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = forward(&p, &cfg, &x).unwrap();
        let (grads, gx) = backward(&p, &cfg, &cache, &proj).unwrap();

        let mut theta: Vec<f64> = p.buffers().concat();
        let analytic: Vec<f64> = grads.buffers().concat();
        let err = grad_check(&mut theta, &analytic, GradCheck::default(), |t| {
            let mut q = p.clone();
            let mut off = 0;
            for b in q.buffers_mut() {
                b.copy_from_slice(&t[off..off + b.len()]);
                off += b.len();
            }
            loss(&q, &x)
        })
        .unwrap();
        assert!(err < 1e-4, "parameter gradient error {err}");

        let mut xs = x.data.clone();
        let err = grad_check(&mut xs, &gx, GradCheck::default(), |t| {
            loss(&p, &WindowBatch { data: t.to_vec(), ..x.clone() })
        })
        .unwrap();
        assert!(err < 1e-4, "input gradient error {err}");
    }

    #[test]
    fn discarded_ramp_inputs_receive_gradient() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = perturbed::<f64>(&cfg, &mut rng);
        let x = random_batch::<f64>(&cfg, 1, &mut rng);
        let (_, cache) = forward(&p, &cfg, &x).unwrap();
        let (_, gx) = backward(&p, &cfg, &cache, &[1.0, 1.0]).unwrap();
        // first and last ramp steps
        for t in [0, cfg.window_len() - 1] {
            assert!(gx[t * 2].abs() > 1e-8 || gx[t * 2 + 1].abs() > 1e-8, "step {t}");
        }
        let (grads, gx) = backward(&p, &cfg, &cache, &[0.0, 0.0]).unwrap();
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(grads.buffers().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn time_reversal_symmetry() {
        let cfg = DecoderConfig { ramp_len: 2, loss_depth: 3, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = perturbed::<f64>(&cfg, &mut rng);
        let x = random_batch::<f64>(&cfg, 4, &mut rng);
        let rev = WindowBatch {
            data: reverse_steps(&x.data, x.steps),
            ..x.clone()
        };
        let (a, _) = forward(&p, &cfg, &x).unwrap();
        let (b, _) = forward(&p.time_reversed(), &cfg, &rev).unwrap();
        let ld = cfg.loss_depth;
        for w in 0..4 {
            for j in 0..ld {
                let (u, v) = (a.logits[w * ld + j], b.logits[w * ld + ld - 1 - j]);
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
        assert_eq!(p.time_reversed().time_reversed(), p);
    }

    #[test]
    fn hard_decisions() {
        assert_eq!(hard_decide(&[0.5f64]), [0]);
        assert_eq!(hard_decide(&[0.9f64]), [1]);
        assert_eq!(hard_decide(&[0.1f32, 0.5, 0.50001, 1.0]), [0, 0, 1, 1]);
    }

    #[test]
    fn stream_matches_independent_windows() {
        let cfg = DecoderConfig { ramp_len: 2, loss_depth: 3, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = perturbed::<f32>(&cfg, &mut rng);
        let n = 10;
        let obs: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let soft = predict_stream_soft(&obs, &p, &cfg).unwrap();
        assert_eq!(soft.len(), n);
        assert_eq!(predict_stream(&obs, &p, &cfg).unwrap().len(), n);

        let mut padded = vec![[0.0; 2]; cfg.ramp_len];
        padded.extend_from_slice(&obs);
        padded.resize(2 * cfg.ramp_len + n.div_ceil(3) * 3, [0.0; 2]);
        let mut expected = Vec::new();
        for w in 0..n.div_ceil(3) {
            let win = SampleWindow::new(&cfg, &padded[w * 3..w * 3 + cfg.window_len()]).unwrap();
            expected.extend(forward_window(&p, &cfg, &win).unwrap().p_hat);
        }
        for (a, b) in soft.iter().zip(&expected) {
            assert_eq!(*a as f64, *b);
        }
        assert_eq!(soft, predict_stream_soft(&obs, &p, &cfg).unwrap());
        assert!(matches!(predict_stream(&[], &p, &cfg), Err(DecoderError::Empty)));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = perturbed::<f32>(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), "m", &p, &cfg, serde_json::json!({"iteration": 7})).unwrap();
        let (q, manifest) = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(p, q);
        assert_eq!(checkpoint_config(&manifest), Some(cfg));
        let other = DecoderConfig { gru_width: 9, ..cfg };
        assert!(matches!(load_checkpoint(&path, &other), Err(DecoderError::Incompatible(_))));
        let other = DecoderConfig { gru_layers: 3, ..cfg };
        assert!(load_checkpoint(&path, &other).is_err());
    }
}
