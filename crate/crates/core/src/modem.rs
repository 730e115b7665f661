//! BPSK/QPSK mapping, the AWGN channel, LLR demapping and the bit
//! interleaver.
//!
//! Conventions: BPSK maps bit 0 to -1 and bit 1 to +1. LLRs are positive
//! when bit 1 is more likely. QPSK points have unit energy and `sigma2` is the
//! noise variance per real dimension.

use std::f64::consts::FRAC_1_SQRT_2;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// LLR magnitude used when the channel is noiseless.
pub const LLR_SATURATION: f64 = 1e6;

pub const DEFAULT_INTERLEAVER_BLOCK: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModemError {
    #[error("QPSK mapping needs an even number of bits, got {0}")]
    OddLength(usize),
    #[error("length {len} is not a multiple of the block length {block_len}")]
    BlockLength { len: usize, block_len: usize },
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
}

/// One complex baseband sample. BPSK leaves `q` at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Symbol {
    pub i: f64,
    pub q: f64,
}

impl Symbol {
    pub const fn new(i: f64, q: f64) -> Self {
        Self { i, q }
    }

    fn dist2(self, other: Symbol) -> f64 {
        let di = self.i - other.i;
        let dq = self.q - other.q;
        di * di + dq * dq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Bpsk,
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
        }
    }
}

impl FromStr for Modulation {
    type Err = ModemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bpsk" => Ok(Self::Bpsk),
            "qpsk" => Ok(Self::Qpsk),
            _ => Err(ModemError::Unknown {
                kind: "modulation",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Labeling {
    #[default]
    #[serde(rename = "gray")]
    Gray,
    #[serde(rename = "anti-gray")]
    AntiGray,
}

const P: f64 = FRAC_1_SQRT_2;

// Indexed by 2 * first_bit + second_bit.
const GRAY_TABLE: [Symbol; 4] = [
    Symbol::new(P, P),   // 00
    Symbol::new(-P, P),  // 01
    Symbol::new(P, -P),  // 10
    Symbol::new(-P, -P), // 11
];

// Angular order (++), (-+), (--), (+-) carries labels 00, 11, 01, 10.
const ANTI_GRAY_TABLE: [Symbol; 4] = [
    Symbol::new(P, P),   // 00
    Symbol::new(-P, -P), // 01
    Symbol::new(P, -P),  // 10
    Symbol::new(-P, P),  // 11
];

impl Labeling {
    /// Constellation point per 2-bit label, indexed by `2 * b0 + b1`.
    pub fn table(self) -> &'static [Symbol; 4] {
        match self {
            Labeling::Gray => &GRAY_TABLE,
            Labeling::AntiGray => &ANTI_GRAY_TABLE,
        }
    }

    pub fn map(self, b0: u8, b1: u8) -> Symbol {
        self.table()[(2 * (b0 & 1) + (b1 & 1)) as usize]
    }
}

impl FromStr for Labeling {
    type Err = ModemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gray" => Ok(Self::Gray),
            "anti-gray" | "antigray" | "anti_gray" => Ok(Self::AntiGray),
            _ => Err(ModemError::Unknown {
                kind: "labeling",
                value: s.to_string(),
            }),
        }
    }
}

pub fn map_bpsk(x: &[u8]) -> Vec<Symbol> {
    x.iter()
        .map(|&b| Symbol::new(if b & 1 == 1 { 1.0 } else { -1.0 }, 0.0))
        .collect()
}

pub fn map_qpsk(x: &[u8], labeling: Labeling) -> Result<Vec<Symbol>, ModemError> {
    if x.len() % 2 != 0 {
        return Err(ModemError::OddLength(x.len()));
    }
    Ok(x.chunks_exact(2)
        .map(|p| labeling.map(p[0], p[1]))
        .collect())
}

/// Nearest-point demapping back to bits.
pub fn hard_demap_qpsk(y: &[Symbol], labeling: Labeling) -> Vec<u8> {
    let table = labeling.table();
    let mut out = Vec::with_capacity(2 * y.len());
    for &s in y {
        let best = (0..4)
            .min_by(|&a, &b| s.dist2(table[a]).total_cmp(&s.dist2(table[b])))
            .unwrap();
        out.push((best >> 1) as u8);
        out.push((best & 1) as u8);
    }
    out
}

/// Per-dimension noise variance for a given Eb/N0, code rate and
/// modulation order, with unit symbol energy.
pub fn ebno_to_sigma2(ebno_db: f64, rate: f64, bits_per_symbol: u32) -> f64 {
    assert!(rate > 0.0, "code rate must be positive");
    if ebno_db == f64::INFINITY {
        return 0.0;
    }
    let ebno = 10f64.powf(ebno_db / 10.0);
    1.0 / (2.0 * rate * bits_per_symbol as f64 * ebno)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub ebno_db: f64,
    pub rate: f64,
    pub modulation: Modulation,
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn new(ebno_db: f64, rate: f64, modulation: Modulation) -> Self {
        Self {
            ebno_db,
            rate,
            modulation,
            sigma2: ebno_to_sigma2(ebno_db, rate, modulation.bits_per_symbol()),
        }
    }

    pub fn noiseless(rate: f64, modulation: Modulation) -> Self {
        Self::new(f64::INFINITY, rate, modulation)
    }
}

/// Adds white Gaussian noise in place: I only for BPSK, I and Q for QPSK.
pub fn add_awgn_in_place<R: Rng + ?Sized>(s: &mut [Symbol], noise: &NoiseSpec, rng: &mut R) {
    if noise.sigma2 == 0.0 {
        return;
    }
    let sigma = noise.sigma2.sqrt();
    for sym in s.iter_mut() {
        let ni: f64 = rng.sample(StandardNormal);
        sym.i += sigma * ni;
        if noise.modulation == Modulation::Qpsk {
            let nq: f64 = rng.sample(StandardNormal);
            sym.q += sigma * nq;
        }
    }
}

pub fn add_awgn<R: Rng + ?Sized>(s: &[Symbol], noise: &NoiseSpec, rng: &mut R) -> Vec<Symbol> {
    let mut out = s.to_vec();
    add_awgn_in_place(&mut out, noise, rng);
    out
}

fn saturate(raw: f64, sigma2: f64) -> f64 {
    if sigma2 == 0.0 {
        if raw == 0.0 {
            0.0
        } else {
            raw.signum() * LLR_SATURATION
        }
    } else {
        (raw / sigma2).clamp(-LLR_SATURATION, LLR_SATURATION)
    }
}

/// `L = 2 y / sigma2` on the I component.
pub fn llr_bpsk(y: &[Symbol], sigma2: f64) -> Vec<f64> {
    y.iter().map(|s| saturate(2.0 * s.i, sigma2)).collect()
}

/// Max-log LLRs, two per symbol, in transmission order.
///
/// `L_b = (min_{s: b=0} |y-s|^2 - min_{s: b=1} |y-s|^2) / (2 sigma2)`, which
/// reduces to [`llr_bpsk`] on a single axis.
pub fn llr_qpsk_maxlog(y: &[Symbol], sigma2: f64, labeling: Labeling) -> Vec<f64> {
    let table = labeling.table();
    let mut out = Vec::with_capacity(2 * y.len());
    for &s in y {
        let d: [f64; 4] = std::array::from_fn(|k| s.dist2(table[k]));
        // bit 0 is the high bit of the table index
        let b0 = d[0].min(d[1]) - d[2].min(d[3]);
        let b1 = d[0].min(d[2]) - d[1].min(d[3]);
        out.push(saturate(0.5 * b0, sigma2));
        out.push(saturate(0.5 * b1, sigma2));
    }
    out
}

/// Per-step neural decoder inputs: two real observations per information
/// bit. BPSK pairs consecutive I samples, QPSK uses I and Q of one symbol.
pub fn observations(y: &[Symbol], modulation: Modulation) -> Vec<[f64; 2]> {
    match modulation {
        Modulation::Bpsk => y.chunks_exact(2).map(|p| [p[0].i, p[1].i]).collect(),
        Modulation::Qpsk => y.iter().map(|s| [s.i, s.q]).collect(),
    }
}

/// Block interleaver with a seeded pseudo-random permutation per block.
#[derive(Debug, Clone)]
pub struct Interleaver {
    block_len: usize,
    seed: u64,
}

impl Interleaver {
    pub fn new(block_len: usize, seed: u64) -> Self {
        assert!(block_len > 0, "interleaver block length must be positive");
        Self { block_len, seed }
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Permutation for block `index`; `out[i] = in[perm[i]]`.
    pub fn permutation(&self, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let mut perm: Vec<usize> = (0..self.block_len).collect();
        perm.shuffle(&mut rng);
        perm
    }

    fn check(&self, len: usize) -> Result<(), ModemError> {
        if len % self.block_len != 0 {
            return Err(ModemError::BlockLength {
                len,
                block_len: self.block_len,
            });
        }
        Ok(())
    }

    pub fn interleave<T: Copy>(&self, x: &[T]) -> Result<Vec<T>, ModemError> {
        self.check(x.len())?;
        let mut out = Vec::with_capacity(x.len());
        for (k, block) in x.chunks_exact(self.block_len).enumerate() {
            let perm = self.permutation(k as u64);
            out.extend(perm.iter().map(|&p| block[p]));
        }
        Ok(out)
    }

    pub fn deinterleave<T: Copy + Default>(&self, y: &[T]) -> Result<Vec<T>, ModemError> {
        self.check(y.len())?;
        let mut out = vec![T::default(); y.len()];
        for (k, (block, dst)) in y
            .chunks_exact(self.block_len)
            .zip(out.chunks_exact_mut(self.block_len))
            .enumerate()
        {
            let perm = self.permutation(k as u64);
            for (i, &p) in perm.iter().enumerate() {
                dst[p] = block[i];
            }
        }
        Ok(out)
    }
}

/// Modulation plus labeling: everything needed to go from coded bits to
/// channel symbols and back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Channel {
    pub modulation: Modulation,
    pub labeling: Labeling,
}

impl Channel {
    pub const BPSK: Channel = Channel {
        modulation: Modulation::Bpsk,
        labeling: Labeling::Gray,
    };

    pub fn qpsk(labeling: Labeling) -> Self {
        Self {
            modulation: Modulation::Qpsk,
            labeling,
        }
    }

    /// Noise for a rate-1/2 code at the given Eb/N0.
    pub fn noise(&self, ebno_db: f64) -> NoiseSpec {
        NoiseSpec::new(ebno_db, 0.5, self.modulation)
    }

    pub fn map(&self, coded: &[u8]) -> Result<Vec<Symbol>, ModemError> {
        match self.modulation {
            Modulation::Bpsk => Ok(map_bpsk(coded)),
            Modulation::Qpsk => map_qpsk(coded, self.labeling),
        }
    }

    /// One LLR per coded bit.
    pub fn llrs(&self, y: &[Symbol], sigma2: f64) -> Vec<f64> {
        match self.modulation {
            Modulation::Bpsk => llr_bpsk(y, sigma2),
            Modulation::Qpsk => llr_qpsk_maxlog(y, sigma2, self.labeling),
        }
    }

    /// Rebuilds symbols from per-step decoder observations.
    pub fn symbols_from_observations(&self, obs: &[[f64; 2]]) -> Vec<Symbol> {
        match self.modulation {
            Modulation::Bpsk => obs
                .iter()
                .flat_map(|o| [Symbol::new(o[0], 0.0), Symbol::new(o[1], 0.0)])
                .collect(),
            Modulation::Qpsk => obs.iter().map(|o| Symbol::new(o[0], o[1])).collect(),
        }
    }
}
