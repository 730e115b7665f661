//! Batch generation with a biased information source, a-priori ramp-up
//! schedules, and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv_code::CodeSpec;
use crate::decoder::{
    backward, forward, hard_decide, predict_stream, save_checkpoint, DecoderConfig, DecoderError,
    ModelParams, WindowBatch,
};
use crate::metrics::count_errors;
use crate::modem::{add_awgn_in_place, observations, Channel, NoiseSpec};
use crate::nn::{bce_with_logits, mse_loss, NnError, OptimizerKind, OptimizerState};
use crate::rng::{lane_rng, LANE_BATCH, LANE_INIT, LANE_PROBE};

pub const TRAIN_LOG_HEADER: &str = "# seqdec train-log v1";
const LOG_COLUMNS: &str = "iteration,p_ap,loss,batch_ber,probe_ber,wallclock_s";

/// Slack for floating-point accumulation when clamping at 1/2.
const HALF_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at iteration {iteration}{}", snapshot.as_ref().map(|p| format!("; parameters saved to {}", p.display())).unwrap_or_default())]
    NonFinite { iteration: u64, snapshot: Option<PathBuf> },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    None,
    Linear,
    Stepwise,
    Abrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub schedule: Schedule,
    pub p_start: f64,
    pub step_delta: f64,
    /// Advance once the smoothed batch BER drops below this fraction of
    /// the current `p_ap`.
    pub advance_ratio: f64,
    pub max_level_iters: u64,
    pub ber_decay: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::None,
            p_start: 0.1,
            step_delta: 0.05,
            advance_ratio: 0.8,
            max_level_iters: 2000,
            ber_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub config: CurriculumConfig,
    pub p_ap: f64,
    pub iterations_at_level: u64,
    pub smoothed_ber: f64,
    /// Per-step increase of the linear schedule.
    pub increment: f64,
}

impl CurriculumState {
    pub fn new(config: CurriculumConfig, iterations: u64) -> Self {
        let p_ap = match config.schedule {
            Schedule::None => 0.5,
            _ => config.p_start.min(0.5),
        };
        Self {
            config,
            p_ap,
            iterations_at_level: 0,
            smoothed_ber: p_ap,
            increment: (0.5 - config.p_start).max(0.0) / iterations.max(1) as f64,
        }
    }

    pub fn at_half(&self) -> bool {
        self.p_ap >= 0.5
    }
}

fn clamp_half(p: f64) -> f64 {
    if p >= 0.5 - HALF_TOL {
        0.5
    } else {
        p
    }
}

/// Advances the schedule by one iteration given the latest batch BER.
pub fn curriculum_next(state: CurriculumState, latest_ber: f64) -> CurriculumState {
    let mut s = state;
    let c = s.config;
    match c.schedule {
        Schedule::None => s.p_ap = 0.5,
        Schedule::Linear => s.p_ap = clamp_half(s.p_ap + s.increment),
        Schedule::Stepwise | Schedule::Abrupt => {
            if s.at_half() {
                return s;
            }
            s.smoothed_ber = c.ber_decay * s.smoothed_ber + (1.0 - c.ber_decay) * latest_ber;
            s.iterations_at_level += 1;
            if s.smoothed_ber < c.advance_ratio * s.p_ap || s.iterations_at_level >= c.max_level_iters {
                s.p_ap = if c.schedule == Schedule::Abrupt {
                    0.5
                } else {
                    clamp_half(s.p_ap + c.step_delta)
                };
                s.smoothed_ber = s.p_ap;
                s.iterations_at_level = 0;
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub code: CodeSpec,
    pub decoder: DecoderConfig,
    pub channel: Channel,
    pub batch_size: usize,
    pub iterations: u64,
    pub train_ebno_db: f64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub curriculum: CurriculumConfig,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub probe_ebno_db: f64,
    pub probe_bits: usize,
    /// 0 disables probing.
    pub probe_every: u64,
}

impl TrainConfig {
    pub fn new(code: CodeSpec) -> Self {
        Self {
            decoder: DecoderConfig::for_code(&code),
            code,
            channel: Channel::BPSK,
            batch_size: 256,
            iterations: 50_000,
            train_ebno_db: 1.25,
            loss: LossKind::Bce,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-4,
            curriculum: CurriculumConfig::default(),
            seed: 1,
            checkpoint_every: 5_000,
            log_every: 1,
            probe_ebno_db: 1.5,
            probe_bits: 100_000,
            probe_every: 250,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.decoder.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let c = &self.curriculum;
        if !(c.p_start > 0.0 && c.p_start <= 0.5) {
            return bad(format!("curriculum.p_start must lie in (0, 0.5], got {}", c.p_start));
        }
        if !(c.step_delta > 0.0) {
            return bad("curriculum.step_delta must be positive".into());
        }
        if !(0.0..1.0).contains(&c.ber_decay) {
            return bad("curriculum.ber_decay must lie in [0, 1)".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        if self.train_ebno_db.is_nan() || self.probe_ebno_db.is_nan() {
            return bad("SNR values must be numbers".into());
        }
        Ok(())
    }
}

/// Windows time-major as the decoder expects, labels `[batch, loss_depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x: WindowBatch<f32>,
    pub labels: Vec<u8>,
}

/// Draws `batch` windows. Each window comes from `memory + window_len`
/// fresh Bernoulli(`p_ap`) bits encoded from the zero state; the outputs of
/// the first `memory` bits are dropped so the window starts in a random
/// state.
pub fn gen_batch<R: Rng + ?Sized>(
    p_ap: f64,
    code: &CodeSpec,
    cfg: &DecoderConfig,
    channel: &Channel,
    noise: &NoiseSpec,
    batch: usize,
    rng: &mut R,
) -> Result<TrainBatch, TrainError> {
    let steps = cfg.window_len();
    let nu = code.memory();
    let mut x = WindowBatch::zeros(steps, batch);
    let mut labels = Vec::with_capacity(batch * cfg.loss_depth);
    let mut u = vec![0u8; nu + steps];
    let mut coded = Vec::with_capacity(2 * (nu + steps));
    for w in 0..batch {
        for b in u.iter_mut() {
            *b = u8::from(rng.random::<f64>() < p_ap);
        }
        coded.clear();
        code.encode_into(&u, 0, &mut coded);
        let mut y = channel
            .map(&coded[2 * nu..])
            .map_err(|e| TrainError::Encode(e.to_string()))?;
        add_awgn_in_place(&mut y, noise, rng);
        for (t, o) in observations(&y, channel.modulation).into_iter().enumerate() {
            x.set(w, t, [o[0] as f32, o[1] as f32]);
        }
        let first = nu + cfg.ramp_len;
        labels.extend_from_slice(&u[first..first + cfg.loss_depth]);
    }
    Ok(TrainBatch { x, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub p_ap: f64,
    pub loss: f32,
    pub batch_ber: f64,
    pub probe_ber: Option<f64>,
    pub wallclock_s: Option<f64>,
}

impl LogRecord {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.p_ap,
            self.loss,
            self.batch_ber,
            opt(self.probe_ber),
            opt(self.wallclock_s)
        )
    }
}

/// Fixed evaluation stream, generated once per run.
#[derive(Debug, Clone)]
struct Probe {
    u: Vec<u8>,
    obs: Vec<[f64; 2]>,
    guard: usize,
}

impl Probe {
    fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let guard = cfg.code.traceback_hint().max(cfg.decoder.ramp_len);
        let mut rng = lane_rng(cfg.seed, LANE_PROBE, 0);
        let u: Vec<u8> = (0..cfg.probe_bits + 2 * guard).map(|_| rng.random_range(0..2u8)).collect();
        let coded = cfg.code.encode(&u).map_err(|e| TrainError::Encode(e.to_string()))?;
        let mut y = cfg.channel.map(&coded).map_err(|e| TrainError::Encode(e.to_string()))?;
        add_awgn_in_place(&mut y, &cfg.channel.noise(cfg.probe_ebno_db), &mut rng);
        Ok(Self {
            u,
            obs: observations(&y, cfg.channel.modulation),
            guard,
        })
    }

    fn ber(&self, params: &ModelParams<f32>, cfg: &DecoderConfig) -> Result<f64, TrainError> {
        let u_hat = predict_stream(&self.obs, params, cfg)?;
        let r = self.guard..self.u.len() - self.guard;
        let n = r.len().max(1);
        Ok(count_errors(&u_hat[r.clone()], &self.u[r]) as f64 / n as f64)
    }
}

/// One optimisation step at a time; [`train`] drives it with logging and
/// checkpoints.
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams<f32>,
    optimizer: OptimizerState<f32>,
    curriculum: CurriculumState,
    noise: NoiseSpec,
    iteration: u64,
    probe: Option<Probe>,
}

/// Outcome of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    /// `p_ap` the batch was drawn with.
    pub p_ap: f64,
    pub loss: f32,
    pub batch_ber: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ModelParams::init(&config.decoder, &mut lane_rng(config.seed, LANE_INIT, 0));
        Self::with_params(config, params)
    }

    /// Starts from existing parameters (fine-tuning, tests).
    pub fn with_params(config: TrainConfig, params: ModelParams<f32>) -> Result<Self, TrainError> {
        config.validate()?;
        params.check_config(&config.decoder)?;
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate, &params.sizes())?;
        let probe = if config.probe_every > 0 && config.probe_bits > 0 {
            Some(Probe::new(&config)?)
        } else {
            None
        };
        Ok(Self {
            curriculum: CurriculumState::new(config.curriculum, config.iterations),
            noise: config.channel.noise(config.train_ebno_db),
            params,
            optimizer,
            iteration: 0,
            probe,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    /// Generates a batch, updates the parameters and advances the schedule.
    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let cfg = &self.config;
        let it = self.iteration + 1;
        let p_ap = self.curriculum.p_ap;
        let mut rng: ChaCha8Rng = lane_rng(cfg.seed, LANE_BATCH, it);
        let batch = gen_batch(p_ap, &cfg.code, &cfg.decoder, &cfg.channel, &self.noise, cfg.batch_size, &mut rng)?;

        let (out, cache) = forward(&self.params, &cfg.decoder, &batch.x)?;
        let (loss, grad) = match cfg.loss {
            LossKind::Bce => bce_with_logits(&out.logits, &batch.labels, cfg.batch_size)?,
            LossKind::Mse => {
                let (l, g) = mse_loss(&out.probs, &batch.labels, cfg.batch_size)?;
                let g = g.iter().zip(&out.probs).map(|(g, p)| g * p * (1.0 - p)).collect();
                (l, g)
            }
        };
        if !loss.is_finite() {
            return Err(self.abort(it));
        }
        let (grads, _) = backward(&self.params, &cfg.decoder, &cache, &grad)?;
        let gbuf = grads.buffers();
        match self.optimizer.step(&mut self.params.buffers_mut(), &gbuf) {
            Err(NnError::NonFinite(_)) => return Err(self.abort(it)),
            r => r?,
        }
        let errors = count_errors(&hard_decide(&out.probs), &batch.labels);
        let batch_ber = errors as f64 / batch.labels.len() as f64;
        self.curriculum = curriculum_next(self.curriculum, batch_ber);
        self.iteration = it;
        Ok(StepStats {
            iteration: it,
            p_ap,
            loss,
            batch_ber,
        })
    }

    fn abort(&self, iteration: u64) -> TrainError {
        TrainError::NonFinite {
            iteration,
            snapshot: None,
        }
    }

    /// BER of the current model on the fixed probe stream.
    pub fn probe_ber(&self) -> Result<Option<f64>, TrainError> {
        self.probe
            .as_ref()
            .map(|p| p.ber(&self.params, &self.config.decoder))
            .transpose()
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, TrainError> {
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "code": self.config.code.label(),
            "p_ap": self.curriculum.p_ap,
            "seed": self.config.seed,
        });
        Ok(save_checkpoint(dir, stem, &self.params, &self.config.decoder, meta)?)
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Log CSV and `checkpoints/` go here when set.
    pub out_dir: Option<PathBuf>,
    /// Record elapsed time; leave off for byte-identical logs.
    pub wallclock: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_stem(iteration: u64) -> String {
    format!("ckpt-{iteration:07}")
}

/// Runs all configured iterations.
pub fn train(config: TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config)?;
    let total = trainer.config.iterations;
    let (probe_every, log_every, ckpt_every) = (
        trainer.config.probe_every,
        trainer.config.log_every,
        trainer.config.checkpoint_every,
    );
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoints"));
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("train_log.csv"))?);
            writeln!(w, "{TRAIN_LOG_HEADER}\n{LOG_COLUMNS}")?;
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.iteration() < total {
        let stats = match trainer.step() {
            Err(TrainError::NonFinite { iteration, .. }) => {
                let snapshot = match &ckpt_dir {
                    Some(d) => Some(trainer.save(d, &format!("abort-{iteration:07}"))?),
                    None => None,
                };
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
                return Err(TrainError::NonFinite { iteration, snapshot });
            }
            r => r?,
        };
        let it = stats.iteration;
        let probe_due = probe_every > 0 && (it % probe_every == 0 || it == total);
        let probe_ber = if probe_due { trainer.probe_ber()? } else { None };
        if it % log_every == 0 || probe_due || it == total {
            let rec = LogRecord {
                iteration: it,
                p_ap: stats.p_ap,
                loss: stats.loss,
                batch_ber: stats.batch_ber,
                probe_ber,
                wallclock_s: opts.wallclock.then(|| start.elapsed().as_secs_f64()),
            };
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            if probe_ber.is_some() {
                log::info!(
                    "iteration {it}: p_ap {:.3} loss {:.4} batch BER {:.4} probe BER {:.5}",
                    rec.p_ap,
                    rec.loss,
                    rec.batch_ber,
                    probe_ber.unwrap_or(f64::NAN)
                );
            }
            log.push(rec);
        }
        if let Some(d) = &ckpt_dir {
            if (ckpt_every > 0 && it % ckpt_every == 0) || it == total {
                checkpoints.push(trainer.save(d, &checkpoint_stem(it))?);
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        log,
        checkpoints,
    })
}
