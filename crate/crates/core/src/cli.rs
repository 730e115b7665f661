//! Experiment runner behind the `seqdec` binary: config files, the
//! subcommands, and their CSV artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv_code::{standard_codes, CodeSpec};
use crate::decoder::{load_checkpoint, DecoderConfig, DecoderError};
use crate::metrics::{
    monte_carlo_ber, nve, snr_grid, BerTable, MetricsError, NnLink, StopRule, UncodedLink, ViterbiLink,
};
use crate::modem::{Channel, Labeling, Modulation};
use crate::nn::{NnError, OptimizerKind};
use crate::training::{train, CurriculumConfig, LossKind, TrainConfig, TrainError, TrainOptions};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input from the user: exit status 2.
    #[error("{0}")]
    Config(String),
    /// Anything that went wrong while running: exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<DecoderError> for CliError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::Config(_)
            | DecoderError::Incompatible(_)
            | DecoderError::Nn(NnError::Checkpoint(_) | NnError::Shape(_)) => CliError::Config(e.to_string()),
            other => runtime(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Decoder(d) => d.into(),
            other => runtime(other),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::GridMismatch(_) | MetricsError::Parse(_) | MetricsError::NoUsablePoints => {
                CliError::Config(e.to_string())
            }
            other => runtime(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSection {
    /// Octal generator pair, e.g. `"133,171"` or `"(o5,o7)_2"`.
    pub generators: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    /// Defaults to the code's traceback length.
    pub ramp_len: Option<usize>,
    /// Defaults to the code's traceback length.
    pub loss_depth: Option<usize>,
    pub gru_layers: usize,
    pub gru_width: usize,
    pub combiner_width: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let d = DecoderConfig::default();
        Self {
            ramp_len: None,
            loss_depth: None,
            gru_layers: d.gru_layers,
            gru_width: d.gru_width,
            combiner_width: d.combiner_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub iterations: u64,
    pub ebno_db: f64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub probe_ebno_db: f64,
    pub probe_bits: usize,
    pub probe_every: u64,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(CodeSpec::new(1, 3).expect("valid code"));
        Self {
            batch_size: t.batch_size,
            iterations: t.iterations,
            ebno_db: t.train_ebno_db,
            loss: t.loss,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            probe_ebno_db: t.probe_ebno_db,
            probe_bits: t.probe_bits,
            probe_every: t.probe_every,
            curriculum: t.curriculum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub num_points: usize,
    pub min_errors: u64,
    pub max_bits: u64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let r = StopRule::default();
        Self {
            snr_min_db: 0.0,
            snr_max_db: 3.5,
            num_points: 8,
            min_errors: r.min_errors,
            max_bits: r.max_bits,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub modulation: Modulation,
    pub labeling: Labeling,
    /// Random bit interleaver in front of the mapper; Viterbi baseline only.
    pub interleave: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Ramp lengths to train and evaluate, each with `loss_depth = 1`.
    pub ramp_lens: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ramp_lens: vec![0, 2, 4, 6, 8, 10, 15, 20],
        }
    }
}

/// The experiment config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub code: CodeSection,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn code(&self) -> Result<CodeSpec, CliError> {
        CodeSpec::parse_octal(&self.code.generators)
            .map_err(|e| CliError::Config(format!("code.generators: {e}")))
    }

    /// Fills in code-dependent defaults so the snapshot is complete.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let code = self.code()?;
        let tb = code.traceback_hint();
        self.decoder.ramp_len.get_or_insert(tb);
        self.decoder.loss_depth.get_or_insert(tb);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.code()?;
        let e = &self.eval;
        if e.num_points == 0 {
            return Err(CliError::Config("eval.num_points must be at least 1".into()));
        }
        if !(e.snr_min_db < e.snr_max_db || (e.num_points == 1 && e.snr_min_db == e.snr_max_db)) {
            return Err(CliError::Config(format!(
                "eval.snr_min_db ({}) must be below eval.snr_max_db ({})",
                e.snr_min_db, e.snr_max_db
            )));
        }
        if e.min_errors == 0 || e.max_bits == 0 {
            return Err(CliError::Config("eval.min_errors and eval.max_bits must be positive".into()));
        }
        self.decoder_config().validate()?;
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let tb = self.code().map(|c| c.traceback_hint()).unwrap_or(0);
        DecoderConfig {
            ramp_len: self.decoder.ramp_len.unwrap_or(tb),
            loss_depth: self.decoder.loss_depth.unwrap_or(tb),
            gru_layers: self.decoder.gru_layers,
            gru_width: self.decoder.gru_width,
            combiner_width: self.decoder.combiner_width,
        }
    }

    pub fn channel(&self) -> Channel {
        Channel {
            modulation: self.channel.modulation,
            labeling: self.channel.labeling,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            decoder: self.decoder_config(),
            channel: self.channel(),
            batch_size: t.batch_size,
            iterations: t.iterations,
            train_ebno_db: t.ebno_db,
            loss: t.loss,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            curriculum: t.curriculum,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            probe_ebno_db: t.probe_ebno_db,
            probe_bits: t.probe_bits,
            probe_every: t.probe_every,
            code: self.code()?,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        snr_grid(self.eval.snr_min_db, self.eval.snr_max_db, self.eval.num_points)
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            min_errors: self.eval.min_errors,
            max_bits: self.eval.max_bits,
            ..StopRule::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqdec", version, about = "Neural and Viterbi decoding of convolutional codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the neural decoder.
    Train(RunArgs),
    /// Monte-Carlo BER of a trained checkpoint.
    Eval(EvalArgs),
    /// Monte-Carlo BER of the Viterbi decoder and of uncoded transmission.
    Baseline(RunArgs),
    /// NVE of one BER table against a reference table.
    Compare(CompareArgs),
    /// List the built-in code family.
    Codes,
    /// Train and evaluate one decoder per ramp length (loss depth 1).
    Sweep(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both train.seed and eval.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 makes every artifact byte-reproducible.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub modulation: Option<Modulation>,
    #[arg(long)]
    pub labeling: Option<Labeling>,
    /// Bit interleaver between encoder and mapper (Viterbi baseline only).
    #[arg(long)]
    pub interleave: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint manifest (`.json`).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// BER table of the decoder under test.
    #[arg(long)]
    pub nn: PathBuf,
    /// Reference BER table.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        if let Some(m) = self.modulation {
            cfg.channel.modulation = m;
        }
        if let Some(l) = self.labeling {
            cfg.channel.labeling = l;
        }
        cfg.channel.interleave |= self.interleave;
        if self.threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        cfg.resolve()
    }

    fn prepare_out(&self, cfg: &ExperimentConfig) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(runtime)?;
        fs::write(self.out.join(RESOLVED_CONFIG), cfg.to_toml()).map_err(runtime)
    }
}

fn reject_interleaver(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.channel.interleave {
        return Err(CliError::Config(
            "channel.interleave applies to the Viterbi baseline only".into(),
        ));
    }
    Ok(())
}

fn set_threads(threads: usize) {
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Runs a parsed command line, returning text for stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Codes => Ok(cmd_codes()),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

pub fn cmd_train(a: &RunArgs) -> Result<String, CliError> {
    let cfg = a.experiment()?;
    reject_interleaver(&cfg)?;
    set_threads(a.threads);
    a.prepare_out(&cfg)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        wallclock: a.threads != 1,
    };
    let outcome = train(cfg.train_config()?, &opts)?;
    let last = outcome.log.last().expect("at least one iteration");
    Ok(format!(
        "trained {} iterations; final loss {} batch BER {}\nlog: {}\ncheckpoint: {}\n",
        last.iteration,
        last.loss,
        last.batch_ber,
        a.out.join("train_log.csv").display(),
        outcome.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let cfg = a.run.experiment()?;
    reject_interleaver(&cfg)?;
    if !a.checkpoint.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            a.checkpoint.display()
        )));
    }
    let dcfg = cfg.decoder_config();
    let (params, _) = load_checkpoint(&a.checkpoint, &dcfg)?;
    set_threads(a.run.threads);
    a.run.prepare_out(&cfg)?;
    let link = NnLink {
        code: cfg.code()?,
        params,
        config: dcfg,
        channel: cfg.channel(),
    };
    let table = monte_carlo_ber(&link, &cfg.grid(), &cfg.stop_rule(), cfg.eval.seed)?;
    let path = a.run.out.join("ber_nn.csv");
    table.write(&path)?;
    Ok(format!("{}written to {}\n", table.to_csv(), path.display()))
}

pub fn cmd_baseline(a: &RunArgs) -> Result<String, CliError> {
    let cfg = a.experiment()?;
    set_threads(a.threads);
    a.prepare_out(&cfg)?;
    let code = cfg.code()?;
    let grid = cfg.grid();
    let rule = cfg.stop_rule();
    let vit = ViterbiLink::new(&code, cfg.channel(), cfg.channel.interleave).map_err(runtime)?;
    let viterbi = monte_carlo_ber(&vit, &grid, &rule, cfg.eval.seed)?;
    let uncoded = monte_carlo_ber(&UncodedLink { channel: cfg.channel() }, &grid, &rule, cfg.eval.seed)?;
    viterbi.write(&a.out.join("ber_viterbi.csv"))?;
    uncoded.write(&a.out.join("ber_uncoded.csv"))?;
    Ok(format!("viterbi\n{}uncoded\n{}", viterbi.to_csv(), uncoded.to_csv()))
}

pub fn cmd_compare(a: &CompareArgs) -> Result<String, CliError> {
    let read = |p: &Path| {
        BerTable::read(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    };
    let report = nve(&read(&a.nn)?, &read(&a.reference)?)?;
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let path = a.out.join("nve.csv");
    fs::write(&path, report.to_csv()).map_err(runtime)?;
    Ok(format!("NVE {} over {} points\nmerged table: {}\n", report.nve, report.used, path.display()))
}

pub fn cmd_codes() -> String {
    let mut s = String::from("code\tmemory\tstates\ttraceback\n");
    for c in standard_codes() {
        writeln!(s, "{}\t{}\t{}\t{}", c.label(), c.memory(), c.num_states(), c.traceback_hint()).unwrap();
    }
    s
}

pub fn cmd_sweep(a: &RunArgs) -> Result<String, CliError> {
    let base = a.experiment()?;
    reject_interleaver(&base)?;
    set_threads(a.threads);
    a.prepare_out(&base)?;
    let code = base.code()?;
    let grid = base.grid();
    let rule = base.stop_rule();
    let vit = ViterbiLink::new(&code, base.channel(), false).map_err(runtime)?;
    let reference = monte_carlo_ber(&vit, &grid, &rule, base.eval.seed)?;
    reference.write(&a.out.join("ber_viterbi.csv"))?;
    let mut csv = String::from("# seqdec ramp-sweep v1\nramp_len,nve\n");
    for &ramp in &base.sweep.ramp_lens {
        let mut cfg = base.clone();
        cfg.decoder.ramp_len = Some(ramp);
        cfg.decoder.loss_depth = Some(1);
        cfg.validate()?;
        let dir = a.out.join(format!("ramp-{ramp:03}"));
        let outcome = train(
            cfg.train_config()?,
            &TrainOptions {
                out_dir: Some(dir.clone()),
                wallclock: a.threads != 1,
            },
        )?;
        let link = NnLink {
            code: code.clone(),
            params: outcome.params,
            config: cfg.decoder_config(),
            channel: cfg.channel(),
        };
        let table = monte_carlo_ber(&link, &grid, &rule, base.eval.seed)?;
        table.write(&dir.join("ber_nn.csv"))?;
        let report = nve(&table, &reference)?;
        writeln!(csv, "{ramp},{}", report.nve).unwrap();
        log::info!("ramp {ramp}: NVE {}", report.nve);
    }
    let path = a.out.join("sweep.csv");
    fs::write(&path, &csv).map_err(runtime)?;
    Ok(csv)
}
