//! RMSProp and Adam over a list of flat parameter buffers.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    RmsProp,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rmsprop" => Ok(Self::RmsProp),
            "adam" => Ok(Self::Adam),
            _ => Err(NnError::InvalidArgument(format!("unknown optimizer `{s}`"))),
        }
    }
}

pub const RMSPROP_RHO: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Accumulators mirror the parameter buffers one-to-one.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    /// Adam first moment; unused by RMSProp.
    first: Vec<Vec<T>>,
    /// Squared-gradient average.
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, sizes: &[usize]) -> Result<Self, NnError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let zeros = || sizes.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            first: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            second: zeros(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Accumulator buffers, for checkpointing: `(first, second)`.
    pub fn accumulators(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Applies one update. Non-finite gradients abort the step and leave
    /// both parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<(), NnError> {
        if params.len() != self.second.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} buffers, got {} parameters and {} gradients",
                self.second.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || g.len() != self.second[i].len() {
                return Err(NnError::Shape(format!("buffer {i} length mismatch")));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient buffer {i}")));
            }
        }
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(EPSILON);
        match self.kind {
            OptimizerKind::RmsProp => {
                let rho = T::lit(RMSPROP_RHO);
                let one_m = T::one() - rho;
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    for ((w, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vi = rho * *vi + one_m * gi * gi;
                        *w -= lr * gi / (vi.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::lit(ADAM_BETA1);
                let b2 = T::lit(ADAM_BETA2);
                let c1 = T::one() - T::lit(ADAM_BETA1.powi(self.step as i32));
                let c2 = T::one() - T::lit(ADAM_BETA2.powi(self.step as i32));
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
