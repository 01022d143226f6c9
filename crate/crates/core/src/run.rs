//! Experiment configuration files and per-seed artifact directories.
//!
//! A run directory `outdir/<experiment>/<method>/<seed>/` holds
//!
//! * `metrics.csv`: one row per evaluation point,
//! * `protocol_pre.csv`, `protocol_post.csv`: Matrix only, message counts per input,
//! * `checkpoint.json`: parameters (see [`crate::checkpoint`]),
//! * `summary.json`: final-window statistics, status, seed and wall time,
//! * `config.toml`: the resolved configuration for exactly this seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::discretize::{DiscretizerConfig, DiscretizerKind, Mode};
use crate::envs::{
    ChannelConfig, MatrixConfig, MatrixEnv, MultiAgentEnv, SpeakerListenerConfig, SpeakerListenerEnv,
};
use crate::trainer::metrics::write_metrics_csv;
use crate::trainer::{
    final_summary, protocol_matrices, stream_rng, FinalSummary, MetricsRecord, ProtocolMatrix, Stream,
    TrainError, Trainer, TrainerConfig,
};

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad or inconsistent configuration. Maps to exit code 1.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running. Maps to exit code 2.
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Matrix,
    SpeakerListener,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizerSection {
    pub kind: DiscretizerKind,
    pub sigma_g: f64,
    pub tau_gs: f64,
}

impl DiscretizerSection {
    pub fn config(&self) -> DiscretizerConfig {
        DiscretizerConfig {
            kind: self.kind,
            sigma_g: self.sigma_g,
            tau_gs: self.tau_gs,
            mode: Mode::Train,
        }
    }
}

/// For the Matrix environment the error rate and flip count come from
/// `[matrix]`; for speaker–listener they are read here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub error_probability: f64,
    pub flips_per_error: usize,
    pub during_training: bool,
    pub during_eval: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub outdir: PathBuf,
    pub seeds: Vec<u64>,
    pub env: EnvKind,
    /// Samples per input number for the protocol matrices (Matrix only).
    pub protocol_samples: usize,
    /// Evaluation episodes dumped to `trace.jsonl` after training; 0 disables.
    pub trace_episodes: usize,
    pub discretizer: DiscretizerSection,
    pub matrix: MatrixConfig,
    pub speaker_listener: SpeakerListenerConfig,
    pub channel: ChannelSection,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// Defaults for an environment: Simple Matrix or the default
    /// speaker–listener arena, with the STE unit.
    pub fn defaults(env: EnvKind) -> Self {
        let (experiment, trainer) = match env {
            EnvKind::Matrix => ("matrix", TrainerConfig::matrix_default()),
            EnvKind::SpeakerListener => ("speaker-listener", TrainerConfig::speaker_listener_default()),
        };
        Self {
            experiment: experiment.into(),
            outdir: PathBuf::from("runs"),
            seeds: vec![0],
            env,
            protocol_samples: 1000,
            trace_episodes: 0,
            discretizer: DiscretizerSection {
                kind: DiscretizerKind::Ste,
                sigma_g: 2.0,
                tau_gs: 1.0,
            },
            matrix: MatrixConfig::simple(),
            speaker_listener: SpeakerListenerConfig::default(),
            channel: ChannelSection {
                error_probability: 0.0,
                flips_per_error: 0,
                during_training: true,
                during_eval: true,
            },
            trainer,
        }
    }

    /// Parses a TOML document on top of the defaults of the environment it
    /// names (`env = ...`, Matrix when absent). Keys not present keep their
    /// defaults; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let user: toml::Table = text.parse().map_err(|e| RunError::Config(format!("{e}")))?;
        Self::from_table(user)
    }

    pub fn from_table(user: toml::Table) -> Result<Self, RunError> {
        let env = match user.get("env") {
            None => EnvKind::Matrix,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| RunError::Config(format!("env: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::defaults(env))
            .map_err(|e| RunError::Config(format!("{e}")))?;
        merge(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e| RunError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let cfg = |e: String| RunError::Config(e);
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return Err(cfg(format!("experiment name `{}` is not a plain name", self.experiment)));
        }
        if self.seeds.is_empty() {
            return Err(cfg("seeds: at least one seed required".into()));
        }
        self.discretizer
            .config()
            .validate()
            .map_err(|e| cfg(format!("discretizer: {e}")))?;
        self.trainer.validate().map_err(|e| cfg(format!("trainer: {e}")))?;
        match self.env {
            EnvKind::Matrix => self.matrix.validate().map_err(|e| cfg(format!("matrix: {e}")))?,
            EnvKind::SpeakerListener => self
                .speaker_listener
                .validate()
                .map_err(|e| cfg(format!("speaker_listener: {e}")))?,
        }
        self.channel()
            .validate(self.message_bits())
            .map_err(|e| cfg(format!("channel: {e}")))?;
        Ok(())
    }

    pub fn message_bits(&self) -> usize {
        match self.env {
            EnvKind::Matrix => self.matrix.message_bits,
            EnvKind::SpeakerListener => self.speaker_listener.message_bits,
        }
    }

    pub fn channel(&self) -> ChannelConfig {
        let (p, k) = match self.env {
            EnvKind::Matrix => (self.matrix.error_probability, self.matrix.max_bit_flips),
            EnvKind::SpeakerListener => (self.channel.error_probability, self.channel.flips_per_error),
        };
        ChannelConfig {
            error_probability: p,
            flips_per_error: k,
            during_training: self.channel.during_training,
            during_eval: self.channel.during_eval,
        }
    }

    /// The same configuration restricted to one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.trainer.seed = seed;
        c
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.outdir
            .join(&self.experiment)
            .join(self.discretizer.kind.name())
            .join(seed.to_string())
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted key such as `trainer.learning_rate` in a TOML table.
pub fn set_key(table: &mut toml::Table, dotted: &str, value: toml::Value) {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("intermediate key is a table");
    }
    t.insert(last.to_string(), value);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub method: DiscretizerKind,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub iterations_completed: usize,
    pub evaluation_points: usize,
    /// Final-10% statistics; absent for an empty history.
    pub final_window: Option<FinalSummary>,
    pub wall_time_seconds: f64,
    pub config: RunConfig,
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub history: Vec<MetricsRecord>,
    pub protocol: Option<(ProtocolMatrix, ProtocolMatrix)>,
}

/// Trainer for either environment behind one type.
#[derive(Clone, Debug)]
pub enum AnyTrainer {
    Matrix(Trainer<MatrixEnv>),
    SpeakerListener(Trainer<SpeakerListenerEnv>),
}

macro_rules! each {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            AnyTrainer::Matrix($t) => $body,
            AnyTrainer::SpeakerListener($t) => $body,
        }
    };
}

impl AnyTrainer {
    /// Fresh parameters for the seed in `config.trainer.seed`.
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        let rt = |e: TrainError| RunError::Config(e.to_string());
        let disc = config.discretizer.config();
        let ch = config.channel();
        Ok(match config.env {
            EnvKind::Matrix => {
                let env = MatrixEnv::new(config.matrix).map_err(|e| RunError::Config(e.to_string()))?;
                AnyTrainer::Matrix(Trainer::new(config.trainer.clone(), disc, ch, env).map_err(rt)?)
            }
            EnvKind::SpeakerListener => {
                let env = SpeakerListenerEnv::new(config.speaker_listener)
                    .map_err(|e| RunError::Config(e.to_string()))?;
                AnyTrainer::SpeakerListener(Trainer::new(config.trainer.clone(), disc, ch, env).map_err(rt)?)
            }
        })
    }

    /// Restores parameters from a checkpoint into the environment of `config`.
    pub fn from_checkpoint(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self, RunError> {
        let rt = |e: TrainError| RunError::Runtime(format!("checkpoint does not fit: {e}"));
        let disc = config.discretizer.config();
        let ch = config.channel();
        let slots = ckpt.slots.clone();
        let mut t = match config.env {
            EnvKind::Matrix => {
                let env = MatrixEnv::new(config.matrix).map_err(|e| RunError::Config(e.to_string()))?;
                AnyTrainer::Matrix(Trainer::with_params(config.trainer.clone(), disc, ch, env, slots).map_err(rt)?)
            }
            EnvKind::SpeakerListener => {
                let env = SpeakerListenerEnv::new(config.speaker_listener)
                    .map_err(|e| RunError::Config(e.to_string()))?;
                AnyTrainer::SpeakerListener(
                    Trainer::with_params(config.trainer.clone(), disc, ch, env, slots).map_err(rt)?,
                )
            }
        };
        each!(&mut t, tr => tr.iteration = ckpt.iteration);
        Ok(t)
    }

    pub fn train_with<F: FnMut(&crate::trainer::IterationStats)>(&mut self, f: F) -> Result<(), TrainError> {
        each!(self, t => t.train_with(f))
    }

    pub fn history(&self) -> &[MetricsRecord] {
        each!(self, t => &t.history)
    }

    pub fn iteration(&self) -> usize {
        each!(self, t => t.iteration)
    }

    pub fn slots(&self) -> &[crate::nets::AgentParams] {
        each!(self, t => &t.slots)
    }

    pub fn max_return(&self) -> Option<f64> {
        each!(self, t => t.env.max_return())
    }

    pub fn evaluate_with(
        &self,
        episodes: usize,
        rngs: &mut crate::trainer::RolloutRngs,
        trace: bool,
    ) -> Result<crate::trainer::EvalResult, TrainError> {
        each!(self, t => t.evaluate_with(episodes, rngs, trace))
    }

    /// Pre- and post-channel protocol matrices of the shared C-Net.
    pub fn protocol(&self, config: &RunConfig, samples: usize) -> Result<Option<(ProtocolMatrix, ProtocolMatrix)>, RunError> {
        let AnyTrainer::Matrix(t) = self else {
            return Ok(None);
        };
        let mut rng = stream_rng(config.trainer.seed, Stream::Protocol);
        protocol_matrices(
            &t.slots[0].c_net,
            &config.matrix,
            &config.discretizer.config(),
            &t.channel,
            samples,
            &mut rng,
        )
        .map(Some)
        .map_err(|e| RunError::Runtime(e.to_string()))
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn write_protocol(dir: &Path, pre: &ProtocolMatrix, post: &ProtocolMatrix) -> Result<(), RunError> {
    write_file(&dir.join("protocol_pre.csv"), |w| pre.write_csv(w))?;
    write_file(&dir.join("protocol_post.csv"), |w| post.write_csv(w))
}

/// Trains one seed and writes its directory. A non-finite loss stops the
/// run, keeps the metrics gathered so far and returns a runtime error
/// after the summary has been written.
pub fn run_seed<F>(config: &RunConfig, seed: u64, progress: F) -> Result<SeedRun, RunError>
where
    F: FnMut(&crate::trainer::IterationStats),
{
    let config = config.for_seed(seed);
    let dir = config.run_dir(seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir.join("config.toml"), |w| w.write_all(config.to_toml().as_bytes()))?;

    let start = Instant::now();
    let mut trainer = AnyTrainer::new(&config)?;
    let outcome = trainer.train_with(progress);
    let history = trainer.history().to_vec();
    write_file(&dir.join("metrics.csv"), |w| write_metrics_csv(w, &history))?;

    let mut protocol = None;
    if outcome.is_ok() {
        Checkpoint::from_trainer(&config, &trainer).save(&dir.join("checkpoint.json"))?;
        protocol = trainer.protocol(&config, config.protocol_samples)?;
        if let Some((pre, post)) = &protocol {
            write_protocol(&dir, pre, post)?;
        }
        if config.trace_episodes > 0 {
            let mut rngs = crate::trainer::RolloutRngs::eval(seed);
            let r = trainer
                .evaluate_with(config.trace_episodes, &mut rngs, true)
                .map_err(|e| RunError::Runtime(e.to_string()))?;
            write_trace(&dir.join("trace.jsonl"), &r.trace)?;
        }
    }
    let summary = RunSummary {
        experiment: config.experiment.clone(),
        method: config.discretizer.kind,
        seed,
        status: if outcome.is_ok() {
            RunStatus::Completed
        } else {
            RunStatus::Failed
        },
        error: outcome.as_ref().err().map(|e| e.to_string()),
        iterations_completed: trainer.iteration(),
        evaluation_points: history.len(),
        final_window: final_summary(&history),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&dir.join("summary.json"), |w| writeln!(w, "{text}"))?;
    if let Err(e) = outcome {
        return Err(RunError::Runtime(format!("seed {seed}: {e}")));
    }
    Ok(SeedRun {
        dir,
        summary,
        history,
        protocol,
    })
}

pub fn write_trace(path: &Path, trace: &[crate::trainer::TraceRecord]) -> Result<(), RunError> {
    write_file(path, |w| {
        for r in trace {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Reads every `summary.json` under `outdir/<experiment>/`, sorted by
/// method then seed.
pub fn collect_summaries(outdir: &Path, experiment: &str) -> Result<Vec<RunSummary>, RunError> {
    let root = outdir.join(experiment);
    let mut out = Vec::new();
    let methods = fs::read_dir(&root).map_err(io_err(&root))?;
    for m in methods {
        let m = m.map_err(io_err(&root))?.path();
        if !m.is_dir() {
            continue;
        }
        for s in fs::read_dir(&m).map_err(io_err(&m))? {
            let path = s.map_err(io_err(&m))?.path().join("summary.json");
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| RunError::Runtime(format!("{}: {e}", path.display())))?;
            out.push(summary);
        }
    }
    out.sort_by(|a, b| (a.method.name(), a.seed).cmp(&(b.method.name(), b.seed)));
    Ok(out)
}

/// One row of the cross-method comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: DiscretizerKind,
    pub seeds: usize,
    /// Mean over seeds of the per-seed final-window mean.
    pub mean: f64,
    /// Population std over seeds of the per-seed final-window mean.
    pub std_across_seeds: f64,
    /// Mean over seeds of the per-seed final-window std.
    pub mean_within_std: f64,
}

pub fn method_table(summaries: &[RunSummary]) -> Vec<MethodRow> {
    DiscretizerKind::ALL
        .iter()
        .filter_map(|&k| {
            let finals: Vec<FinalSummary> = summaries
                .iter()
                .filter(|s| s.method == k)
                .filter_map(|s| s.final_window)
                .collect();
            if finals.is_empty() {
                return None;
            }
            let means: Vec<f64> = finals.iter().map(|f| f.mean).collect();
            let stds: Vec<f64> = finals.iter().map(|f| f.std).collect();
            let (mean, std_across_seeds) = crate::trainer::mean_std(&means);
            Some(MethodRow {
                method: k,
                seeds: finals.len(),
                mean,
                std_across_seeds,
                mean_within_std: crate::trainer::mean_std(&stds).0,
            })
        })
        .collect()
}

pub fn write_method_table<W: Write>(out: &mut W, rows: &[MethodRow]) -> std::io::Result<()> {
    writeln!(out, "method,seeds,mean,std_across_seeds,mean_within_std")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method.name(),
            r.seeds,
            r.mean,
            r.std_across_seeds,
            r.mean_within_std
        )?;
    }
    Ok(())
}
