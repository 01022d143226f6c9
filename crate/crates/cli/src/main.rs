//! `dialcomm` command-line harness.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dialcomm::checkpoint::Checkpoint;
use dialcomm::discretize::{response_histogram, DiscretizerConfig, DiscretizerKind, Mode};
use dialcomm::run::{
    collect_summaries, method_table, run_seed, set_key, write_method_table, write_protocol, write_trace,
    AnyTrainer, EnvKind, RunConfig, RunError,
};
use dialcomm::trainer::{stream_rng, RolloutRngs, Stream};

#[derive(Parser)]
#[command(name = "dialcomm", version, about = "Learned discrete communication between DQN agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write its artifact directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily.
    Eval(EvalArgs),
    /// Output distribution of a discretization unit at fixed inputs.
    Histogram(HistogramArgs),
    /// Protocol matrices of a Matrix checkpoint, before and after the channel.
    Protocol(ProtocolArgs),
    /// Final-window comparison across methods and seeds of one experiment.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    /// Matrix: number of agents.
    #[arg(long)]
    n: Option<usize>,
    /// Matrix: number of distinct input numbers.
    #[arg(long)]
    m: Option<usize>,
    /// Message width in bits.
    #[arg(long)]
    bits: Option<usize>,
    /// Probability that a message is corrupted.
    #[arg(long)]
    p_error: Option<f64>,
    /// Bits flipped per corrupted message.
    #[arg(long)]
    flips: Option<usize>,
    /// dru, ste, gs, st-dru or st-gs.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    /// Seed; repeat the flag for several seeds.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    sigma_g: Option<f64>,
    #[arg(long)]
    tau_gs: Option<f64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    /// Arbitrary override, e.g. `--set trainer.gamma=0.9`. Values are TOML.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Matrix,
    SpeakerListener,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write one JSON record per episode step to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ModeArg {
    Train,
    Eval,
    Both,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    method: String,
    /// Comma-separated inputs.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![-2.0, -0.1, 0.1, 2.0])]
    x: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma_g: f64,
    #[arg(long, default_value_t = 1.0)]
    tau_gs: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Messages drawn per input number.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the channel error probability of the checkpoint's config.
    #[arg(long)]
    p_error: Option<f64>,
    #[arg(long)]
    flips: Option<usize>,
    /// Directory for protocol_pre.csv and protocol_post.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long, default_value = "runs")]
    outdir: PathBuf,
    #[arg(long)]
    experiment: String,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Histogram(a) => histogram(a),
        Command::Protocol(a) => protocol(a),
        Command::Summarize(a) => summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dialcomm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> RunError {
    RunError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> RunError {
    RunError::Runtime(e.to_string())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, RunError> {
    let mut table = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let env = match a.env {
        Some(EnvArg::Matrix) => Some(EnvKind::Matrix),
        Some(EnvArg::SpeakerListener) => Some(EnvKind::SpeakerListener),
        None => None,
    };
    if let Some(env) = env {
        let name = match env {
            EnvKind::Matrix => "matrix",
            EnvKind::SpeakerListener => "speaker-listener",
        };
        set_key(&mut table, "env", name.into());
    }
    let is_sl = table.get("env").and_then(|v| v.as_str()) == Some("speaker-listener");
    let int = |v: usize| toml::Value::Integer(v as i64);
    if let Some(v) = a.n {
        set_key(&mut table, "matrix.n_agents", int(v));
    }
    if let Some(v) = a.m {
        set_key(&mut table, "matrix.n_numbers", int(v));
    }
    if let Some(v) = a.bits {
        let key = if is_sl { "speaker_listener.message_bits" } else { "matrix.message_bits" };
        set_key(&mut table, key, int(v));
    }
    if let Some(v) = a.p_error {
        let key = if is_sl { "channel.error_probability" } else { "matrix.error_probability" };
        set_key(&mut table, key, v.into());
    }
    if let Some(v) = a.flips {
        let key = if is_sl { "channel.flips_per_error" } else { "matrix.max_bit_flips" };
        set_key(&mut table, key, int(v));
    }
    if let Some(v) = &a.method {
        let kind: DiscretizerKind = v.parse().map_err(config_err)?;
        set_key(&mut table, "discretizer.kind", kind.name().into());
    }
    if let Some(v) = a.iters {
        set_key(&mut table, "trainer.iterations", int(v));
    }
    if !a.seed.is_empty() {
        let seeds = a.seed.iter().map(|&s| toml::Value::Integer(s as i64)).collect();
        set_key(&mut table, "seeds", toml::Value::Array(seeds));
    }
    if let Some(v) = a.lr {
        set_key(&mut table, "trainer.learning_rate", v.into());
    }
    if let Some(v) = a.episodes {
        set_key(&mut table, "trainer.episodes_per_iteration", int(v));
    }
    if let Some(v) = a.eval_every {
        set_key(&mut table, "trainer.eval_every", int(v));
    }
    if let Some(v) = a.eval_episodes {
        set_key(&mut table, "trainer.eval_episodes", int(v));
    }
    if let Some(v) = a.sigma_g {
        set_key(&mut table, "discretizer.sigma_g", v.into());
    }
    if let Some(v) = a.tau_gs {
        set_key(&mut table, "discretizer.tau_gs", v.into());
    }
    if let Some(v) = &a.outdir {
        set_key(&mut table, "outdir", v.to_string_lossy().as_ref().into());
    }
    if let Some(v) = &a.experiment {
        set_key(&mut table, "experiment", v.as_str().into());
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let value = parse_toml_value(v.trim());
        set_key(&mut table, k.trim(), value);
    }
    RunConfig::from_table(table)
}

/// A TOML literal, or a bare string when it does not parse as one.
fn parse_toml_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn train(a: TrainArgs) -> Result<(), RunError> {
    let config = resolve_config(&a)?;
    if a.dry_run {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let every = (config.trainer.iterations / 20).max(1);
    for &seed in &config.seeds {
        let quiet = a.quiet;
        let run = run_seed(&config, seed, |s| {
            if !quiet && s.iteration % every == 0 {
                eprintln!(
                    "seed {seed} iter {:>7} loss {:>10.4} train return {:>8.3} eps {:.3}",
                    s.iteration, s.loss, s.mean_train_return, s.epsilon
                );
            }
        })?;
        let fw = match run.summary.final_window {
            Some(f) => format!("{:.3} ± {:.3}", f.mean, f.std),
            None => "n/a (no evaluation points)".into(),
        };
        println!(
            "{} seed {seed}: final-10% return {fw} ({:.1}s) -> {}",
            config.discretizer.kind,
            run.summary.wall_time_seconds,
            run.dir.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), RunError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let config = ckpt.config.for_seed(a.seed);
    let trainer = AnyTrainer::from_checkpoint(&config, &ckpt)?;
    let mut rngs = RolloutRngs::eval(a.seed);
    let r = trainer
        .evaluate_with(a.episodes, &mut rngs, a.trace.is_some())
        .map_err(|e| match e {
            dialcomm::trainer::TrainError::Config(m) => RunError::Config(m),
            other => runtime_err(other),
        })?;
    if let Some(path) = &a.trace {
        write_trace(path, &r.trace)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "iteration": ckpt.iteration,
            "episodes": a.episodes,
            "seed": a.seed,
            "mean_return": r.mean,
            "return_std": r.std,
            "max_return": trainer.max_return(),
        })
    );
    Ok(())
}

fn histogram(a: HistogramArgs) -> Result<(), RunError> {
    let kind: DiscretizerKind = a.method.parse().map_err(config_err)?;
    let modes: Vec<Mode> = match a.mode {
        ModeArg::Train => vec![Mode::Train],
        ModeArg::Eval => vec![Mode::Eval],
        ModeArg::Both => vec![Mode::Train, Mode::Eval],
    };
    let mut rng = stream_rng(a.seed, Stream::Noise);
    let mut out = Vec::new();
    writeln!(out, "method,mode,x,samples,bin_lower,bin_upper,count").map_err(runtime_err)?;
    for mode in modes {
        let cfg = DiscretizerConfig {
            kind,
            sigma_g: a.sigma_g,
            tau_gs: a.tau_gs,
            mode,
        };
        cfg.validate().map_err(config_err)?;
        for &x in &a.x {
            let h = response_histogram(&cfg, x, a.samples, a.bins, &mut rng).map_err(config_err)?;
            for ((lo, hi), c) in h.bin_edges().into_iter().zip(&h.bins) {
                writeln!(out, "{},{},{x},{},{lo},{hi},{c}", kind.name(), mode_name(mode), a.samples)
                    .map_err(runtime_err)?;
            }
            println!(
                "{} {} x={x}: P(0)={:.4} P(1)={:.4}",
                kind.name(),
                mode_name(mode),
                h.fraction_zeros(),
                h.fraction_ones()
            );
        }
    }
    write_bytes(&a.out, &out)
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Train => "train",
        Mode::Eval => "eval",
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime_err(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn protocol(a: ProtocolArgs) -> Result<(), RunError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut config = ckpt.config.for_seed(a.seed);
    if config.env != EnvKind::Matrix {
        return Err(config_err("protocol matrices are defined for the Matrix environment only"));
    }
    if let Some(p) = a.p_error {
        config.matrix.error_probability = p;
    }
    if let Some(k) = a.flips {
        config.matrix.max_bit_flips = k;
    }
    config.validate()?;
    let trainer = AnyTrainer::from_checkpoint(&config, &ckpt)?;
    let (pre, post) = trainer
        .protocol(&config, a.samples)?
        .ok_or_else(|| config_err("checkpoint has no Matrix communication network"))?;
    fs::create_dir_all(&a.out).map_err(|e| runtime_err(format!("{}: {e}", a.out.display())))?;
    write_protocol(&a.out, &pre, &post)?;
    for i in 0..pre.counts.len() {
        println!(
            "input {i}: mode {} pre-support {:?} post-support {:?}",
            dialcomm::trainer::protocol::pattern_label(pre.mode(i), pre.bits),
            pre.support(i),
            post.support(i)
        );
    }
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<(), RunError> {
    let summaries = collect_summaries(&a.outdir, &a.experiment)?;
    if summaries.is_empty() {
        return Err(runtime_err(format!(
            "no summaries under {}",
            a.outdir.join(&a.experiment).display()
        )));
    }
    let rows = method_table(&summaries);
    let mut out = Vec::new();
    write_method_table(&mut out, &rows).map_err(runtime_err)?;
    match &a.out {
        Some(p) => write_bytes(p, &out)?,
        None => print!("{}", String::from_utf8_lossy(&out)),
    }
    for r in &rows {
        eprintln!(
            "{:>6}: {:.3} ± {:.3} over {} seed(s)",
            r.method.name(),
            r.mean,
            r.mean_within_std,
            r.seeds
        );
    }
    Ok(())
}
