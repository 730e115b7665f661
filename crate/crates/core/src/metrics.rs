//! Error-rate statistics: BER, per-position BER, NVE, and a Monte-Carlo
//! estimator that simulates until a minimum number of errors is seen.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::conv_code::{CodeSpec, Trellis};
use crate::decoder::{predict_stream, DecoderConfig, ModelParams};
use crate::modem::{add_awgn_in_place, observations, Channel, Interleaver, NoiseSpec, Symbol};
use crate::rng::{lane_rng, LANE_MONTE_CARLO};
use crate::viterbi::decode_windowed;

pub const BER_TABLE_HEADER: &str = "# seqdec ber-table v1";
pub const NVE_TABLE_HEADER: &str = "# seqdec nve-merge v1";
const BER_COLUMNS: &str = "snr_db,ber,errors,bits,censored";

/// Relative tolerance when matching SNR grids.
const GRID_TOL: f64 = 1e-9;

pub type LinkError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("SNR grids differ: {0}")]
    GridMismatch(String),
    #[error("every reference point has zero BER")]
    NoUsablePoints,
    #[error("simulation failed at {snr_db} dB: {message}")]
    Link { snr_db: f64, message: String },
    #[error("malformed BER table: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of positions where the streams differ.
pub fn ber(u_hat: &[u8], u: &[u8]) -> Result<f64, MetricsError> {
    if u_hat.len() != u.len() {
        return Err(MetricsError::Length(u_hat.len(), u.len()));
    }
    if u.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(count_errors(u_hat, u) as f64 / u.len() as f64)
}

pub fn count_errors(u_hat: &[u8], u: &[u8]) -> u64 {
    u_hat.iter().zip(u).filter(|(a, b)| a != b).count() as u64
}

/// BER at each window position for row-major `[windows, depth]` batches.
pub fn ber_per_position(pred: &[u8], labels: &[u8], depth: usize) -> Result<Vec<f64>, MetricsError> {
    if pred.len() != labels.len() {
        return Err(MetricsError::Length(pred.len(), labels.len()));
    }
    if depth == 0 || labels.is_empty() || labels.len() % depth != 0 {
        return Err(MetricsError::Length(labels.len(), depth));
    }
    let windows = labels.len() / depth;
    let mut errs = vec![0usize; depth];
    for (p, l) in pred.chunks_exact(depth).zip(labels.chunks_exact(depth)) {
        for k in 0..depth {
            errs[k] += usize::from(p[k] != l[k]);
        }
    }
    Ok(errs.into_iter().map(|e| e as f64 / windows as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerPoint {
    pub snr_db: f64,
    pub errors: u64,
    pub bits: u64,
    /// The bit cap was reached before the error target.
    pub censored: bool,
}

impl BerPoint {
    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    /// Binomial standard error of [`BerPoint::ber`].
    pub fn std_error(&self) -> f64 {
        let p = self.ber();
        (p * (1.0 - p) / self.bits.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BerTable {
    pub points: Vec<BerPoint>,
}

impl BerTable {
    pub fn snr_points(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.snr_db).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{BER_TABLE_HEADER}\n{BER_COLUMNS}\n");
        for p in &self.points {
            writeln!(s, "{},{:e},{},{},{}", p.snr_db, p.ber(), p.errors, p.bits, p.censored).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some(BER_TABLE_HEADER) {
            return Err(MetricsError::Parse(format!("first line must be `{BER_TABLE_HEADER}`")));
        }
        if lines.next().map(str::trim) != Some(BER_COLUMNS) {
            return Err(MetricsError::Parse(format!("column line must be `{BER_COLUMNS}`")));
        }
        let mut points = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || MetricsError::Parse(format!("row {}: `{line}`", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            points.push(BerPoint {
                snr_db: f[0].parse().map_err(|_| bad())?,
                errors: f[2].parse().map_err(|_| bad())?,
                bits: f[3].parse().map_err(|_| bad())?,
                censored: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { points })
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvePoint {
    pub snr_db: f64,
    pub nn_ber: f64,
    pub ref_ber: f64,
    /// `None` where the reference saw no errors.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NveReport {
    pub nve: f64,
    /// Points that entered the average.
    pub used: usize,
    pub points: Vec<NvePoint>,
}

impl NveReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{NVE_TABLE_HEADER}\nsnr_db,nn_ber,ref_ber,ratio\n");
        for p in &self.points {
            let ratio = p.ratio.map(|r| r.to_string()).unwrap_or_default();
            writeln!(s, "{},{:e},{:e},{ratio}", p.snr_db, p.nn_ber, p.ref_ber).unwrap();
        }
        s
    }
}

/// Mean of the per-point BER ratios `nn / reference`. Points where the
/// reference has zero BER are skipped with a warning.
pub fn nve(nn: &BerTable, reference: &BerTable) -> Result<NveReport, MetricsError> {
    if nn.points.is_empty() {
        return Err(MetricsError::Empty);
    }
    if nn.points.len() != reference.points.len() {
        return Err(MetricsError::GridMismatch(format!(
            "{} points vs {}",
            nn.points.len(),
            reference.points.len()
        )));
    }
    let mut points = Vec::with_capacity(nn.points.len());
    let (mut sum, mut used) = (0.0, 0);
    for (a, b) in nn.points.iter().zip(&reference.points) {
        if (a.snr_db - b.snr_db).abs() > GRID_TOL * (1.0 + b.snr_db.abs()) {
            return Err(MetricsError::GridMismatch(format!("{} dB vs {} dB", a.snr_db, b.snr_db)));
        }
        let ratio = if b.errors == 0 {
            log::warn!("reference BER is zero at {} dB; point excluded from NVE", b.snr_db);
            None
        } else {
            let r = a.ber() / b.ber();
            sum += r;
            used += 1;
            Some(r)
        };
        points.push(NvePoint {
            snr_db: a.snr_db,
            nn_ber: a.ber(),
            ref_ber: b.ber(),
            ratio,
        });
    }
    if used == 0 {
        return Err(MetricsError::NoUsablePoints);
    }
    Ok(NveReport {
        nve: sum / used as f64,
        used,
        points,
    })
}

/// `n` equally spaced points from `min` to `max` inclusive.
pub fn snr_grid(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..n)
            .map(|i| min + (max - min) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// A transmitter, channel and decoder that reports bit errors.
pub trait BerLink: Sync {
    /// Sends `bits` counted information bits at `ebno_db`; returns the
    /// number of decoding errors among them.
    fn run_chunk(&self, ebno_db: f64, bits: usize, rng: &mut ChaCha8Rng) -> Result<u64, LinkError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_bits: u64,
    /// Chunk sizes double from `first_chunk` up to `max_chunk`.
    pub first_chunk: usize,
    pub max_chunk: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            min_errors: 100,
            max_bits: 10_000_000,
            first_chunk: 2_000,
            max_chunk: 100_000,
        }
    }
}

impl StopRule {
    fn chunk_len(&self, index: u64) -> usize {
        let doubled = self.first_chunk.max(1).saturating_mul(1usize << index.min(40));
        doubled.min(self.max_chunk.max(self.first_chunk).max(1))
    }
}

/// Simulates each grid point until `rule.min_errors` errors or
/// `rule.max_bits` bits. Chunks draw from their own seeded streams and are
/// tallied in index order, so the table is identical for any thread count.
pub fn monte_carlo_ber(
    link: &dyn BerLink,
    grid: &[f64],
    rule: &StopRule,
    seed: u64,
) -> Result<BerTable, MetricsError> {
    let mut points = Vec::with_capacity(grid.len());
    for (pi, &snr) in grid.iter().enumerate() {
        // without noise a single chunk says all there is to say
        let cap = if snr == f64::INFINITY {
            rule.max_chunk.min(rule.max_bits as usize) as u64
        } else {
            rule.max_bits
        };
        let (mut errors, mut bits, mut next) = (0u64, 0u64, 0u64);
        let round = rayon::current_num_threads().max(1);
        'point: while bits < cap {
            let mut jobs = Vec::with_capacity(round);
            let mut planned = bits;
            while jobs.len() < round && planned < cap {
                let len = (rule.chunk_len(next) as u64).min(cap - planned);
                jobs.push((next, len as usize));
                planned += len;
                next += 1;
            }
            let results: Vec<Result<u64, LinkError>> = jobs
                .par_iter()
                .map(|&(index, len)| {
                    let mut rng = lane_rng(seed, LANE_MONTE_CARLO, ((pi as u64) << 32) | index);
                    link.run_chunk(snr, len, &mut rng)
                })
                .collect();
            for ((_, len), res) in jobs.iter().zip(results) {
                errors += res.map_err(|e| MetricsError::Link {
                    snr_db: snr,
                    message: e.to_string(),
                })?;
                bits += *len as u64;
                if errors >= rule.min_errors {
                    break 'point;
                }
            }
        }
        points.push(BerPoint {
            snr_db: snr,
            errors,
            bits,
            censored: errors < rule.min_errors,
        });
    }
    Ok(BerTable { points })
}

fn random_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: u64 = rng.random();
        out.extend((0..64.min(n - out.len())).map(|i| ((w >> i) & 1) as u8));
    }
    out
}

/// Uncoded transmission with hard decisions; the textbook reference curve.
#[derive(Debug, Clone)]
pub struct UncodedLink {
    pub channel: Channel,
}

impl BerLink for UncodedLink {
    fn run_chunk(&self, ebno_db: f64, bits: usize, rng: &mut ChaCha8Rng) -> Result<u64, LinkError> {
        let n = bits + bits % 2;
        let u = random_bits(n, rng);
        let noise = NoiseSpec::new(ebno_db, 1.0, self.channel.modulation);
        let mut y = self.channel.map(&u)?;
        add_awgn_in_place(&mut y, &noise, rng);
        let llr = self.channel.llrs(&y, noise.sigma2.max(f64::MIN_POSITIVE));
        let hard: Vec<u8> = llr.iter().map(|&l| u8::from(l > 0.0)).collect();
        Ok(count_errors(&hard[..bits], &u[..bits]))
    }
}

/// Counted bits are framed by this many uncounted bits on both sides so
/// stream edges do not bias the estimate.
fn guard_bits(code: &CodeSpec, ramp: usize) -> usize {
    code.traceback_hint().max(ramp)
}

struct Frame {
    u: Vec<u8>,
    y: Vec<Symbol>,
    noise: NoiseSpec,
    guard: usize,
}

fn send_frame(
    code: &CodeSpec,
    channel: &Channel,
    interleave: bool,
    guard: usize,
    ebno_db: f64,
    bits: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Frame, Option<Interleaver>), LinkError> {
    let u = random_bits(bits + 2 * guard, rng);
    let mut coded = code.encode(&u)?;
    let pi = if interleave {
        let pi = Interleaver::new(coded.len(), rng.random());
        coded = pi.interleave(&coded)?;
        Some(pi)
    } else {
        None
    };
    let noise = channel.noise(ebno_db);
    let mut y = channel.map(&coded)?;
    add_awgn_in_place(&mut y, &noise, rng);
    Ok((Frame { u, y, noise, guard }, pi))
}

impl Frame {
    fn errors(&self, u_hat: &[u8], bits: usize) -> u64 {
        let r = self.guard..self.guard + bits;
        count_errors(&u_hat[r.clone()], &self.u[r])
    }
}

/// Soft-input windowed Viterbi, optionally behind a random bit interleaver
/// (one permutation per chunk).
#[derive(Debug, Clone)]
pub struct ViterbiLink {
    pub code: CodeSpec,
    pub trellis: Trellis,
    pub traceback: usize,
    pub channel: Channel,
    pub interleave: bool,
}

impl ViterbiLink {
    pub fn new(code: &CodeSpec, channel: Channel, interleave: bool) -> Result<Self, LinkError> {
        Ok(Self {
            code: code.clone(),
            trellis: Trellis::new(code)?,
            traceback: code.traceback_hint(),
            channel,
            interleave,
        })
    }
}

impl BerLink for ViterbiLink {
    fn run_chunk(&self, ebno_db: f64, bits: usize, rng: &mut ChaCha8Rng) -> Result<u64, LinkError> {
        let guard = guard_bits(&self.code, 0);
        let (frame, pi) = send_frame(&self.code, &self.channel, self.interleave, guard, ebno_db, bits, rng)?;
        let mut llr = self.channel.llrs(&frame.y, frame.noise.sigma2);
        if let Some(pi) = pi {
            llr = pi.deinterleave(&llr)?;
        }
        let u_hat = decode_windowed(&llr, &self.trellis, self.traceback)?;
        Ok(frame.errors(&u_hat, bits))
    }
}

/// The neural decoder fed with raw channel observations.
#[derive(Debug, Clone)]
pub struct NnLink {
    pub code: CodeSpec,
    pub params: ModelParams<f32>,
    pub config: DecoderConfig,
    pub channel: Channel,
}

impl BerLink for NnLink {
    fn run_chunk(&self, ebno_db: f64, bits: usize, rng: &mut ChaCha8Rng) -> Result<u64, LinkError> {
        let guard = guard_bits(&self.code, self.config.ramp_len);
        let (frame, _) = send_frame(&self.code, &self.channel, false, guard, ebno_db, bits, rng)?;
        let obs = observations(&frame.y, self.channel.modulation);
        let u_hat = predict_stream(&obs, &self.params, &self.config)?;
        Ok(frame.errors(&u_hat, bits))
    }
}

/// Synthetic decoder that flips each bit independently with probability
/// `q`, for checking the estimator itself.
#[derive(Debug, Clone, Copy)]
pub struct FlipLink {
    pub q: f64,
}

impl BerLink for FlipLink {
    fn run_chunk(&self, _ebno_db: f64, bits: usize, rng: &mut ChaCha8Rng) -> Result<u64, LinkError> {
        Ok((0..bits).filter(|_| rng.random::<f64>() < self.q).count() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv_code::standard_codes;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn q(x: f64) -> f64 {
        1.0 - Normal::standard().cdf(x)
    }

    fn table(points: &[(f64, u64, u64)]) -> BerTable {
        BerTable {
            points: points
                .iter()
                .map(|&(snr_db, errors, bits)| BerPoint { snr_db, errors, bits, censored: false })
                .collect(),
        }
    }

    #[test]
    fn scalar_ber() {
        assert_eq!(ber(&[0, 1, 1], &[0, 1, 1]).unwrap(), 0.0);
        assert_eq!(ber(&[1, 0, 0], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ber(&[0, 0, 0, 0, 0, 0, 0, 1], &[0; 8]).unwrap(), 0.125);
        assert!(matches!(ber(&[0], &[0, 1]), Err(MetricsError::Length(1, 2))));
        assert!(ber(&[], &[]).is_err());
    }

    #[test]
    fn per_position_ber() {
        assert_eq!(ber_per_position(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), [0.0, 0.0]);
        let labels = [0u8; 12];
        let mut pred = [0u8; 12];
        pred[0] = 1;
        pred[6] = 1;
        let per = ber_per_position(&pred, &labels, 3).unwrap();
        assert_eq!(per, [0.5, 0.0, 0.0]);
        let mean: f64 = per.iter().sum::<f64>() / 3.0;
        assert!((mean - ber(&pred, &labels).unwrap()).abs() < 1e-15);
        assert!(ber_per_position(&pred, &labels, 5).is_err());
    }

    #[test]
    fn nve_arithmetic() {
        let grid = snr_grid(0.0, 3.5, 8);
        assert_eq!(grid.len(), 8);
        assert!((grid[1] - 0.5).abs() < 1e-12 && grid[7] == 3.5);
        let r = table(&grid.iter().map(|&s| (s, 50, 1000)).collect::<Vec<_>>());
        assert_eq!(nve(&r, &r).unwrap().nve, 1.0);
        let nn = table(&grid.iter().map(|&s| (s, 100, 1000)).collect::<Vec<_>>());
        let rep = nve(&nn, &r).unwrap();
        assert_eq!((rep.nve, rep.used), (2.0, 8));

        let shifted = table(&grid.iter().map(|&s| (s + 0.1, 50, 1000)).collect::<Vec<_>>());
        assert!(matches!(nve(&nn, &shifted), Err(MetricsError::GridMismatch(_))));
        assert!(nve(&nn, &table(&[(0.0, 1, 10)])).is_err());

        let with_zero = table(&[(0.0, 10, 100), (1.0, 0, 100)]);
        let rep = nve(&table(&[(0.0, 20, 100), (1.0, 3, 100)]), &with_zero).unwrap();
        assert_eq!((rep.nve, rep.used), (2.0, 1));
        assert_eq!(rep.points[1].ratio, None);
        assert!(matches!(
            nve(&with_zero, &table(&[(0.0, 0, 10), (1.0, 0, 10)])),
            Err(MetricsError::NoUsablePoints)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let mut t = table(&[(0.0, 120, 1000), (0.5, 101, 20000)]);
        t.points[1].censored = true;
        let text = t.to_csv();
        assert!(text.starts_with(BER_TABLE_HEADER));
        assert_eq!(BerTable::from_csv(&text).unwrap(), t);
        assert!(BerTable::from_csv("snr_db,ber\n1,2\n").is_err());
    }

    #[test]
    fn uncoded_bpsk_matches_gaussian_tail() {
        let link = UncodedLink { channel: Channel::BPSK };
        let grid = [0.0, 2.0, 4.0, 6.0];
        let t = monte_carlo_ber(&link, &grid, &StopRule::default(), 1).unwrap();
        for p in &t.points {
            let theory = q((2.0 * 10f64.powf(p.snr_db / 10.0)).sqrt());
            assert!(p.errors >= 100 && !p.censored);
            let se = (theory * (1.0 - theory) / p.bits as f64).sqrt();
            assert!((p.ber() - theory).abs() < 3.0 * se, "{} dB: {} vs {theory}", p.snr_db, p.ber());
        }
    }

    #[test]
    fn flip_estimator_is_unbiased() {
        for (seed, q) in [(3, 0.01), (4, 0.2)] {
            let rule = StopRule { min_errors: 2000, ..StopRule::default() };
            let t = monte_carlo_ber(&FlipLink { q }, &[0.0], &rule, seed).unwrap();
            let p = t.points[0];
            let se = (q * (1.0 - q) / p.bits as f64).sqrt();
            assert!((p.ber() - q).abs() < 3.0 * se);
        }
    }

    #[test]
    fn doubling_error_target_shrinks_relative_error_by_sqrt2() {
        let rule = |e| StopRule { min_errors: e, max_bits: u64::MAX, first_chunk: 10, max_chunk: 10 };
        let rel = |p: &BerPoint| p.std_error() / p.ber();
        let a = monte_carlo_ber(&FlipLink { q: 0.01 }, &[0.0], &rule(100), 5).unwrap().points[0];
        let b = monte_carlo_ber(&FlipLink { q: 0.01 }, &[0.0], &rule(200), 5).unwrap().points[0];
        let ratio = rel(&a) / rel(&b);
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn stop_rule_and_censoring() {
        let rule = StopRule { min_errors: 100, max_bits: 5_000, first_chunk: 1000, max_chunk: 4000 };
        let t = monte_carlo_ber(&FlipLink { q: 0.001 }, &[1.0], &rule, 9).unwrap();
        assert_eq!(t.points[0].bits, 5_000);
        assert!(t.points[0].censored);
        assert_eq!(t, monte_carlo_ber(&FlipLink { q: 0.001 }, &[1.0], &rule, 9).unwrap());
        assert_eq!((rule.chunk_len(0), rule.chunk_len(1), rule.chunk_len(5)), (1000, 2000, 4000));
    }

    #[test]
    fn noiseless_viterbi_is_error_free() {
        let rule = StopRule { max_chunk: 5_000, ..StopRule::default() };
        for code in standard_codes().into_iter().take(5) {
            let link = ViterbiLink::new(&code, Channel::BPSK, false).unwrap();
            let t = monte_carlo_ber(&link, &[f64::INFINITY], &rule, 2).unwrap();
            assert_eq!((t.points[0].errors, t.points[0].bits), (0, 5_000));
        }
    }

    #[test]
    fn coded_beats_uncoded_at_high_snr() {
        let code = CodeSpec::parse_octal("5,7").unwrap();
        let rule = StopRule { min_errors: 200, ..StopRule::default() };
        let coded = monte_carlo_ber(&ViterbiLink::new(&code, Channel::BPSK, false).unwrap(), &[4.0], &rule, 1).unwrap();
        let plain = monte_carlo_ber(&UncodedLink { channel: Channel::BPSK }, &[4.0], &rule, 1).unwrap();
        assert!(coded.points[0].ber() < plain.points[0].ber());
    }

    #[test]
    fn interleaved_qpsk_link_runs() {
        let code = CodeSpec::parse_octal("5,7").unwrap();
        let link = ViterbiLink::new(&code, Channel::qpsk(crate::modem::Labeling::AntiGray), true).unwrap();
        let t = monte_carlo_ber(&link, &[f64::INFINITY, 2.0], &StopRule { max_chunk: 4000, ..StopRule::default() }, 3).unwrap();
        assert_eq!(t.points[0].errors, 0);
        assert!(t.points[1].errors >= 100);
    }
}
