//! Rate-1/2 feedforward convolutional codes.
//!
//! Generators are given in octal. Bit `i` of a generator mask multiplies the
//! input bit `u[k - i]`, so the least-significant tap is the current input
//! and the most-significant tap is the oldest bit held in the register.
//!
//! The encoder state packs the `memory` previous inputs with `u[k-1]` in bit
//! 0. Feeding bit `b` moves the register to `((state << 1) | b) & mask`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest memory accepted by [`Trellis::new`] unless a caller raises it.
pub const DEFAULT_MAX_MEMORY: usize = 12;

/// Rate numerator and denominator. Only rate 1/2 is supported.
pub const RATE: (u32, u32) = (1, 2);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("malformed octal generator `{0}`")]
    MalformedOctal(String),
    #[error("generator polynomial must be nonzero")]
    ZeroPolynomial,
    #[error("expected two generators separated by ',', got {0}")]
    GeneratorCount(usize),
    #[error("generators imply memory {inferred} but memory {declared} was declared")]
    MemoryMismatch { declared: usize, inferred: usize },
    #[error("memory {memory} exceeds the configured maximum {max}")]
    MemoryTooLarge { memory: usize, max: usize },
    #[error("input stream is empty")]
    EmptyInput,
}

/// A rate-1/2 feedforward convolutional code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeSpec {
    generators: [u32; 2],
    memory: usize,
    traceback_hint: usize,
}

impl CodeSpec {
    /// Builds a code from raw generator masks, inferring the memory from the
    /// highest set bit of either mask.
    pub fn new(g1: u32, g2: u32) -> Result<Self, CodeError> {
        if g1 == 0 || g2 == 0 {
            return Err(CodeError::ZeroPolynomial);
        }
        let memory = (31 - (g1 | g2).leading_zeros()) as usize;
        Ok(Self {
            generators: [g1, g2],
            memory,
            traceback_hint: 5 * (memory + 1),
        })
    }

    /// Parses `"g1,g2"` in octal, optionally suffixed with `_m` to pin the
    /// memory (e.g. `"1,3_1"`). A pinned memory that disagrees with the
    /// generators is rejected.
    pub fn parse_octal(text: &str) -> Result<Self, CodeError> {
        let text = text.trim();
        let (pair, declared) = match text.rsplit_once('_') {
            Some((pair, m)) => {
                let m = m
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| CodeError::MalformedOctal(text.to_string()))?;
                (pair, Some(m))
            }
            None => (text, None),
        };
        let pair = pair.trim().trim_start_matches('(').trim_end_matches(')');
        let tokens: Vec<&str> = pair.split(',').map(str::trim).collect();
        if tokens.len() != 2 {
            return Err(CodeError::GeneratorCount(tokens.len()));
        }
        let mut masks = [0u32; 2];
        for (mask, tok) in masks.iter_mut().zip(&tokens) {
            let digits = tok.trim_start_matches(['o', 'O']);
            if digits.is_empty() {
                return Err(CodeError::MalformedOctal(tok.to_string()));
            }
            *mask = u32::from_str_radix(digits, 8)
                .map_err(|_| CodeError::MalformedOctal(tok.to_string()))?;
        }
        let code = Self::new(masks[0], masks[1])?;
        if let Some(declared) = declared {
            if declared != code.memory {
                return Err(CodeError::MemoryMismatch {
                    declared,
                    inferred: code.memory,
                });
            }
        }
        Ok(code)
    }

    pub fn generators(&self) -> [u32; 2] {
        self.generators
    }

    /// Encoder memory ν.
    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn constraint_length(&self) -> usize {
        self.memory + 1
    }

    /// Rule-of-thumb decision delay, `5 * (ν + 1)`.
    pub fn traceback_hint(&self) -> usize {
        self.traceback_hint
    }

    pub fn num_states(&self) -> usize {
        1 << self.memory
    }

    fn state_mask(&self) -> usize {
        self.num_states() - 1
    }

    /// Output pair for the full register contents `reg` (bit 0 = newest).
    #[inline]
    pub fn outputs(&self, reg: usize) -> [u8; 2] {
        let reg = reg as u32;
        [
            ((reg & self.generators[0]).count_ones() & 1) as u8,
            ((reg & self.generators[1]).count_ones() & 1) as u8,
        ]
    }

    /// Encodes `u` starting from the all-zero state. No tail bits are
    /// appended; the output has `2 * u.len()` bits.
    pub fn encode(&self, u: &[u8]) -> Result<Vec<u8>, CodeError> {
        if u.is_empty() {
            return Err(CodeError::EmptyInput);
        }
        let mut out = Vec::with_capacity(2 * u.len());
        self.encode_into(u, 0, &mut out);
        Ok(out)
    }

    /// Encodes from an arbitrary start state, appending to `out`. Returns the
    /// final state.
    pub fn encode_into(&self, u: &[u8], start_state: usize, out: &mut Vec<u8>) -> usize {
        let mask = self.state_mask();
        let mut state = start_state & mask;
        for &bit in u {
            let reg = (state << 1) | (bit & 1) as usize;
            out.extend_from_slice(&self.outputs(reg));
            state = reg & mask;
        }
        state
    }

    /// Octal label such as `(o133,o171)_6`.
    pub fn label(&self) -> String {
        format!(
            "(o{:o},o{:o})_{}",
            self.generators[0], self.generators[1], self.memory
        )
    }
}

impl fmt::Display for CodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:o},{:o}", self.generators[0], self.generators[1])
    }
}

impl FromStr for CodeSpec {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_octal(s)
    }
}

/// Free-function form of [`CodeSpec::parse_octal`].
pub fn parse_octal_generators(text: &str) -> Result<CodeSpec, CodeError> {
    CodeSpec::parse_octal(text)
}

/// The code family studied for the neural decoder, memory 1 through 10.
pub fn standard_codes() -> Vec<CodeSpec> {
    ["1,3", "5,7", "23,35", "133,171", "561,753", "2335,3661"]
        .iter()
        .map(|s| CodeSpec::parse_octal(s).expect("builtin code table"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub next_state: usize,
    pub outputs: [u8; 2],
}

/// State-transition graph of a [`CodeSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trellis {
    code: CodeSpec,
    /// Indexed by `2 * state + input`.
    transitions: Vec<Transition>,
}

impl Trellis {
    pub fn new(code: &CodeSpec) -> Result<Self, CodeError> {
        Self::with_max_memory(code, DEFAULT_MAX_MEMORY)
    }

    pub fn with_max_memory(code: &CodeSpec, max_memory: usize) -> Result<Self, CodeError> {
        if code.memory() > max_memory {
            return Err(CodeError::MemoryTooLarge {
                memory: code.memory(),
                max: max_memory,
            });
        }
        let mask = code.state_mask();
        let transitions = (0..code.num_states())
            .flat_map(|s| {
                (0..2usize).map(move |b| {
                    let reg = (s << 1) | b;
                    Transition {
                        next_state: reg & mask,
                        outputs: code.outputs(reg),
                    }
                })
            })
            .collect();
        Ok(Self {
            code: code.clone(),
            transitions,
        })
    }

    pub fn code(&self) -> &CodeSpec {
        &self.code
    }

    pub fn num_states(&self) -> usize {
        self.code.num_states()
    }

    pub fn memory(&self) -> usize {
        self.code.memory()
    }

    #[inline]
    pub fn transition(&self, state: usize, input: u8) -> Transition {
        self.transitions[2 * state + input as usize]
    }

    /// The two `(previous_state, input)` pairs entering `state`, lower
    /// previous state first.
    #[inline]
    pub fn predecessors(&self, state: usize) -> [(usize, u8); 2] {
        let input = (state & 1) as u8;
        let base = state >> 1;
        let top = if self.memory() == 0 {
            0
        } else {
            1 << (self.memory() - 1)
        };
        [(base, input), (base | top, input)]
    }

    /// Walks the trellis from state 0 along `u`, emitting the code bits.
    pub fn walk(&self, u: &[u8]) -> Vec<u8> {
        let mut state = 0;
        let mut out = Vec::with_capacity(2 * u.len());
        for &b in u {
            let t = self.transition(state, b);
            out.extend_from_slice(&t.outputs);
            state = t.next_state;
        }
        out
    }
}

/// Free-function form of [`Trellis::new`].
pub fn build_trellis(code: &CodeSpec) -> Result<Trellis, CodeError> {
    Trellis::new(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_table_codes() {
        let cases = [
            ("133,171", 6, 35),
            ("1,3", 1, 10),
            ("5,7", 2, 15),
            ("23,35", 4, 25),
            ("561,753", 8, 45),
            ("2335,3661", 10, 55),
        ];
        for (text, nu, tb) in cases {
            let c = CodeSpec::parse_octal(text).unwrap();
            assert_eq!(c.memory(), nu, "{text}");
            assert_eq!(c.traceback_hint(), tb, "{text}");
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            CodeSpec::parse_octal("18,7"),
            Err(CodeError::MalformedOctal(_))
        ));
        assert_eq!(CodeSpec::parse_octal("0,7"), Err(CodeError::ZeroPolynomial));
        assert_eq!(
            CodeSpec::parse_octal("5"),
            Err(CodeError::GeneratorCount(1))
        );
        assert_eq!(
            CodeSpec::parse_octal("5,7_3"),
            Err(CodeError::MemoryMismatch {
                declared: 3,
                inferred: 2
            })
        );
        assert!(CodeSpec::parse_octal("o133, o171").is_ok());
        assert!(CodeSpec::parse_octal("(o1,o3)_1").is_ok());
        assert!(CodeSpec::parse_octal("5,,7").is_err());
    }

    #[test]
    fn trellis_sizes_and_guard() {
        let t = Trellis::new(&CodeSpec::parse_octal("1,3").unwrap()).unwrap();
        assert_eq!(t.num_states(), 2);
        assert_eq!(t.transitions.len(), 4);
        let t = Trellis::new(&CodeSpec::parse_octal("133,171").unwrap()).unwrap();
        assert_eq!(t.num_states(), 64);
        let big = CodeSpec::new(1, 1 << 13).unwrap();
        assert_eq!(
            Trellis::new(&big),
            Err(CodeError::MemoryTooLarge { memory: 13, max: 12 })
        );
    }

    #[test]
    fn hand_traced_outputs() {
        let c57 = CodeSpec::parse_octal("5,7").unwrap();
        let t = Trellis::new(&c57).unwrap();
        assert_eq!(t.transition(0, 1).outputs, [1, 1]);
        assert_eq!(c57.encode(&[1, 0, 0]).unwrap(), vec![1, 1, 0, 1, 1, 1]);
        let c13 = CodeSpec::parse_octal("1,3").unwrap();
        assert_eq!(c13.encode(&[1]).unwrap(), vec![1, 1]);
        assert_eq!(c57.encode(&[0; 9]).unwrap(), vec![0; 18]);
        assert_eq!(c57.encode(&[]), Err(CodeError::EmptyInput));
    }

    #[test]
    fn every_state_has_two_in_two_out() {
        for code in standard_codes().into_iter().take(5) {
            let t = Trellis::new(&code).unwrap();
            let mut incoming = vec![0usize; t.num_states()];
            for s in 0..t.num_states() {
                for b in 0..2 {
                    incoming[t.transition(s, b).next_state] += 1;
                }
                for (p, b) in t.predecessors(s) {
                    assert_eq!(t.transition(p, b).next_state, s);
                }
            }
            assert!(incoming.iter().all(|&n| n == 2));
        }
    }

    #[test]
    fn trellis_is_deterministic() {
        let c = CodeSpec::parse_octal("23,35").unwrap();
        assert_eq!(Trellis::new(&c).unwrap(), Trellis::new(&c).unwrap());
    }

    fn any_code() -> impl Strategy<Value = CodeSpec> {
        (0..6usize).prop_map(|i| standard_codes()[i].clone())
    }

    proptest! {
        #[test]
        fn encoder_is_linear(code in any_code(), pair in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pair.into_iter().unzip();
            let x: Vec<u8> = a.iter().zip(&b).map(|(p, q)| p ^ q).collect();
            let ea = code.encode(&a).unwrap();
            let eb = code.encode(&b).unwrap();
            let ex = code.encode(&x).unwrap();
            let sum: Vec<u8> = ea.iter().zip(&eb).map(|(p, q)| p ^ q).collect();
            prop_assert_eq!(ex, sum);
        }

        #[test]
        fn delayed_input_delays_codeword(code in any_code(), u in prop::collection::vec(0u8..2, 1..200)) {
            let mut delayed = vec![0u8];
            delayed.extend_from_slice(&u);
            let e = code.encode(&u).unwrap();
            let ed = code.encode(&delayed).unwrap();
            prop_assert_eq!(&ed[..2], &[0, 0]);
            prop_assert_eq!(&ed[2..], &e[..]);
        }

        #[test]
        fn trellis_walk_matches_encoder(code in any_code(), u in prop::collection::vec(0u8..2, 1..200)) {
            let t = Trellis::new(&code).unwrap();
            prop_assert_eq!(t.walk(&u), code.encode(&u).unwrap());
        }
    }
}
