//! Hard-output Viterbi decoding over LLR inputs.
//!
//! Path metrics are correlations `sum L_i * (2 x_i - 1)`, maximized. Ties
//! go to the lower predecessor state, and the final state is the best metric
//! with ties to the lower index, so decoding is fully deterministic.

use thiserror::Error;

use crate::conv_code::{CodeSpec, Trellis};

/// Upper bound on the brute-force oracle's message length.
pub const BRUTE_FORCE_MAX_BITS: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ViterbiError {
    #[error("no LLRs to decode")]
    Empty,
    #[error("LLR count {0} is not a multiple of 2")]
    OddLength(usize),
    #[error("traceback length must be at least 1")]
    ZeroTraceback,
    #[error("brute-force search over {0} bits exceeds the limit of {BRUTE_FORCE_MAX_BITS}")]
    TooManyBits(usize),
    #[error("expected {expected} LLRs, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Where the encoder is assumed to start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartState {
    #[default]
    Zero,
    /// Any state equally likely; used for windows cut out of a stream.
    Unknown,
}

/// Correlation metric of a codeword against LLRs.
pub fn correlation_metric(llrs: &[f64], codeword: &[u8]) -> f64 {
    llrs.iter()
        .zip(codeword)
        .map(|(&l, &x)| if x == 1 { l } else { -l })
        .sum()
}

/// Packed survivor decisions for a bounded number of steps.
struct Survivors {
    words_per_step: usize,
    capacity: usize,
    bits: Vec<u64>,
}

impl Survivors {
    fn new(num_states: usize, capacity: usize) -> Self {
        let words_per_step = num_states.div_ceil(64);
        Self {
            words_per_step,
            capacity,
            bits: vec![0; words_per_step * capacity],
        }
    }

    fn row_mut(&mut self, step: usize) -> &mut [u64] {
        let slot = step % self.capacity;
        let w = self.words_per_step;
        let row = &mut self.bits[slot * w..(slot + 1) * w];
        row.fill(0);
        row
    }

    #[inline]
    fn get(&self, step: usize, state: usize) -> u64 {
        let slot = step % self.capacity;
        (self.bits[slot * self.words_per_step + state / 64] >> (state % 64)) & 1
    }
}

struct Acs<'a> {
    trellis: &'a Trellis,
    metrics: Vec<f64>,
    scratch: Vec<f64>,
    survivors: Survivors,
    top: usize,
}

impl<'a> Acs<'a> {
    fn new(trellis: &'a Trellis, capacity: usize, start: StartState) -> Self {
        let n = trellis.num_states();
        let metrics = match start {
            StartState::Zero => {
                let mut m = vec![f64::NEG_INFINITY; n];
                m[0] = 0.0;
                m
            }
            StartState::Unknown => vec![0.0; n],
        };
        Self {
            trellis,
            metrics,
            scratch: vec![0.0; n],
            survivors: Survivors::new(n, capacity),
            top: 1 << (trellis.memory() - 1),
        }
    }

    /// One add-compare-select step on the LLR pair of time `step`.
    fn step(&mut self, step: usize, l0: f64, l1: f64) {
        // branch metric indexed by 2 * x0 + x1
        let bm = [-l0 - l1, -l0 + l1, l0 - l1, l0 + l1];
        let row = self.survivors.row_mut(step);
        let mut best = f64::NEG_INFINITY;
        for s in 0..self.trellis.num_states() {
            let input = (s & 1) as u8;
            let p0 = s >> 1;
            let p1 = p0 | self.top;
            let o0 = self.trellis.transition(p0, input).outputs;
            let o1 = self.trellis.transition(p1, input).outputs;
            let m0 = self.metrics[p0] + bm[(2 * o0[0] + o0[1]) as usize];
            let m1 = self.metrics[p1] + bm[(2 * o1[0] + o1[1]) as usize];
            let m = if m1 > m0 {
                row[s / 64] |= 1 << (s % 64);
                m1
            } else {
                m0
            };
            self.scratch[s] = m;
            best = best.max(m);
        }
        // renormalize so long streams do not drift
        for (dst, &m) in self.metrics.iter_mut().zip(&self.scratch) {
            *dst = m - best;
        }
    }

    fn best_state(&self) -> usize {
        let mut best = 0;
        for (s, &m) in self.metrics.iter().enumerate() {
            if m > self.metrics[best] {
                best = s;
            }
        }
        best
    }

    #[inline]
    fn previous(&self, step: usize, state: usize) -> usize {
        let d = self.survivors.get(step, state) as usize;
        (state >> 1) | (d * self.top)
    }
}

fn check_llrs(llrs: &[f64]) -> Result<usize, ViterbiError> {
    if llrs.is_empty() {
        return Err(ViterbiError::Empty);
    }
    if llrs.len() % 2 != 0 {
        return Err(ViterbiError::OddLength(llrs.len()));
    }
    Ok(llrs.len() / 2)
}

/// Memory-0 codes have no state; every bit is decided on its own branch.
fn decode_memoryless(llrs: &[f64], trellis: &Trellis) -> Vec<u8> {
    let o0 = trellis.transition(0, 0).outputs;
    let o1 = trellis.transition(0, 1).outputs;
    llrs.chunks_exact(2)
        .map(|l| {
            let m0 = correlation_metric(l, &o0);
            let m1 = correlation_metric(l, &o1);
            u8::from(m1 > m0)
        })
        .collect()
}

fn decode(
    llrs: &[f64],
    trellis: &Trellis,
    traceback: Option<usize>,
    start: StartState,
) -> Result<Vec<u8>, ViterbiError> {
    let n = check_llrs(llrs)?;
    if trellis.memory() == 0 {
        return Ok(decode_memoryless(llrs, trellis));
    }
    let capacity = match traceback {
        Some(tb) if tb < n => tb + 1,
        _ => n,
    };
    let mut acs = Acs::new(trellis, capacity, start);
    let mut out = vec![0u8; n];
    let mut decided = 0;
    for (t, pair) in llrs.chunks_exact(2).enumerate() {
        acs.step(t, pair[0], pair[1]);
        if let Some(tb) = traceback {
            if t >= tb {
                let mut s = acs.best_state();
                for back in ((t - tb + 1)..=t).rev() {
                    s = acs.previous(back, s);
                }
                out[t - tb] = (s & 1) as u8;
                decided = t - tb + 1;
            }
        }
    }
    // flush the undecided tail along the best final survivor
    let mut s = acs.best_state();
    for t in (decided..n).rev() {
        out[t] = (s & 1) as u8;
        if t > decided {
            s = acs.previous(t, s);
        }
    }
    Ok(out)
}

/// Maximum-likelihood decoding of a whole block starting from state 0,
/// without termination.
pub fn decode_block(llrs: &[f64], trellis: &Trellis) -> Result<Vec<u8>, ViterbiError> {
    decode(llrs, trellis, None, StartState::Zero)
}

/// Block decoding with a configurable start-state assumption.
pub fn decode_block_from(
    llrs: &[f64],
    trellis: &Trellis,
    start: StartState,
) -> Result<Vec<u8>, ViterbiError> {
    decode(llrs, trellis, None, start)
}

/// Sliding-window decoding: after step `t >= traceback_len` the bit at
/// `t - traceback_len` is emitted from the current best survivor. The tail
/// is flushed from the final best path.
pub fn decode_windowed(
    llrs: &[f64],
    trellis: &Trellis,
    traceback_len: usize,
) -> Result<Vec<u8>, ViterbiError> {
    if traceback_len == 0 {
        return Err(ViterbiError::ZeroTraceback);
    }
    decode(llrs, trellis, Some(traceback_len), StartState::Zero)
}

/// Exhaustive ML search over all `2^k` messages of length `k`. Ties go to the
/// lexicographically smallest message.
pub fn brute_force_ml(llrs: &[f64], code: &CodeSpec, k: usize) -> Result<Vec<u8>, ViterbiError> {
    if k > BRUTE_FORCE_MAX_BITS {
        return Err(ViterbiError::TooManyBits(k));
    }
    if k == 0 {
        return Err(ViterbiError::Empty);
    }
    if llrs.len() != 2 * k {
        return Err(ViterbiError::LengthMismatch {
            expected: 2 * k,
            got: llrs.len(),
        });
    }
    let mut best = (f64::NEG_INFINITY, 0u32);
    let mut u = vec![0u8; k];
    let mut x = Vec::with_capacity(2 * k);
    for m in 0..(1u32 << k) {
        for (i, bit) in u.iter_mut().enumerate() {
            *bit = ((m >> (k - 1 - i)) & 1) as u8;
        }
        x.clear();
        code.encode_into(&u, 0, &mut x);
        let metric = correlation_metric(llrs, &x);
        if metric > best.0 {
            best = (metric, m);
        }
    }
    Ok((0..k).map(|i| ((best.1 >> (k - 1 - i)) & 1) as u8).collect())
}
