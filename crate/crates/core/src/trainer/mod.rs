//! DIAL training: batched on-policy rollouts whose messages stay inside the
//! computation graph, a DQN loss over every acting agent, and greedy
//! evaluation.

pub mod metrics;
pub mod protocol;
mod rollout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{DiscretizeError, DiscretizerConfig, Mode};
use crate::envs::{ChannelConfig, EnvError, EnvLayout, MultiAgentEnv};
use crate::gradcore::{GradError, Graph, Optimizer, OptimizerKind};
use crate::nets::{AgentParams, MlpSpec, NetError};

pub use metrics::{
    communication_amplitude, ewma, final_summary, mean_std, FinalSummary, MetricsRecord,
    AMPLITUDE_EWMA_ALPHA,
};
pub use protocol::{protocol_matrices, ProtocolMatrix};
pub use rollout::{td_target, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error("non-finite loss {loss} at iteration {iteration}: {detail}")]
    NonFiniteLoss {
        iteration: usize,
        loss: f64,
        detail: String,
    },
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub tau_target: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `iterations` over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub parameter_sharing: bool,
    /// Replace every received message by zeros (communication ablation).
    pub ablate_messages: bool,
    pub seed: u64,
    pub a_net: MlpSpec,
    pub c_net: MlpSpec,
}

impl TrainerConfig {
    pub fn matrix_default() -> Self {
        Self {
            gamma: 1.0,
            tau_target: 0.01,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Rms,
            clip_norm: Some(10.0),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            iterations: 70_000,
            episodes_per_iteration: 32,
            eval_every: 100,
            eval_episodes: 100,
            parameter_sharing: true,
            ablate_messages: false,
            seed: 0,
            a_net: MlpSpec::a_net_default(),
            c_net: MlpSpec::c_net_default(),
        }
    }

    pub fn speaker_listener_default() -> Self {
        Self {
            gamma: 0.95,
            learning_rate: 1e-3,
            iterations: 20_000,
            eval_every: 50,
            eval_episodes: 10,
            parameter_sharing: false,
            ..Self::matrix_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.tau_target > 0.0 && self.tau_target <= 1.0) {
            return bad(format!("tau_target must lie in (0, 1], got {}", self.tau_target));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1], got {e}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad(format!(
                "epsilon_decay_fraction must lie in [0, 1], got {}",
                self.epsilon_decay_fraction
            ));
        }
        if self.episodes_per_iteration == 0 {
            return bad("episodes_per_iteration must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        self.a_net.validate()?;
        self.c_net.validate()?;
        Ok(())
    }

    /// Exploration rate used during iteration `iteration` (0-based).
    pub fn epsilon(&self, iteration: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.iterations as f64;
        if span <= 0.0 || iteration as f64 >= span {
            return self.epsilon_end;
        }
        let f = iteration as f64 / span;
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Named random streams of one run. Each is an independent ChaCha stream
/// under the run seed, so consuming one never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Env = 1,
    Explore = 2,
    Noise = 3,
    Channel = 4,
    EvalEnv = 5,
    EvalExplore = 6,
    EvalNoise = 7,
    EvalChannel = 8,
    Protocol = 9,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// The four streams a rollout consumes.
#[derive(Clone, Debug)]
pub struct RolloutRngs {
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub channel: ChaCha8Rng,
}

impl RolloutRngs {
    pub fn train(seed: u64) -> Self {
        Self {
            env: stream_rng(seed, Stream::Env),
            explore: stream_rng(seed, Stream::Explore),
            noise: stream_rng(seed, Stream::Noise),
            channel: stream_rng(seed, Stream::Channel),
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self {
            env: stream_rng(seed, Stream::EvalEnv),
            explore: stream_rng(seed, Stream::EvalExplore),
            noise: stream_rng(seed, Stream::EvalNoise),
            channel: stream_rng(seed, Stream::EvalChannel),
        }
    }
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub loss: f64,
    pub amplitude: Option<f64>,
    pub grad_norm: f64,
    pub mean_train_return: f64,
    pub epsilon: f64,
}

/// Returns of a batch of greedy evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Debug)]
pub struct Trainer<E: MultiAgentEnv> {
    pub config: TrainerConfig,
    pub discretizer: DiscretizerConfig,
    pub channel: ChannelConfig,
    pub env: E,
    layout: EnvLayout,
    /// One entry under parameter sharing, otherwise one per agent.
    pub slots: Vec<AgentParams>,
    optimizer: Optimizer,
    train_rngs: RolloutRngs,
    eval_rngs: RolloutRngs,
    pub iteration: usize,
    amplitude_ewma: metrics::Ewma,
    window: (f64, usize),
    pub history: Vec<MetricsRecord>,
}

impl<E: MultiAgentEnv> Trainer<E> {
    pub fn new(
        config: TrainerConfig,
        discretizer: DiscretizerConfig,
        channel: ChannelConfig,
        env: E,
    ) -> Result<Self> {
        config.validate()?;
        discretizer.validate()?;
        let layout = env.layout();
        channel.validate(layout.message_bits)?;
        check_layout(&layout, config.parameter_sharing)?;
        let mut init = stream_rng(config.seed, Stream::Init);
        let n_slots = if config.parameter_sharing { 1 } else { layout.n_agents };
        let slots = (0..n_slots)
            .map(|slot| {
                AgentParams::new(
                    config.a_net.clone(),
                    config.c_net.clone(),
                    layout.obs_dims[slot],
                    layout.incoming_dim(slot),
                    layout.n_actions,
                    layout.message_bits,
                    config.tau_target,
                    &mut init,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::assemble(config, discretizer, channel, env, layout, slots))
    }

    /// Resumes from existing parameters; their widths must match `env`.
    pub fn with_params(
        config: TrainerConfig,
        discretizer: DiscretizerConfig,
        channel: ChannelConfig,
        env: E,
        slots: Vec<AgentParams>,
    ) -> Result<Self> {
        config.validate()?;
        discretizer.validate()?;
        let layout = env.layout();
        channel.validate(layout.message_bits)?;
        check_layout(&layout, config.parameter_sharing)?;
        let n_slots = if config.parameter_sharing { 1 } else { layout.n_agents };
        if slots.len() != n_slots {
            return Err(TrainError::Config(format!(
                "expected {n_slots} parameter slots, got {}",
                slots.len()
            )));
        }
        for (k, s) in slots.iter().enumerate() {
            let want = (
                layout.obs_dims[k],
                layout.incoming_dim(k),
                layout.n_actions,
                layout.message_bits,
            );
            let got = (s.obs_dim(), s.incoming_dim(), s.a_net.output, s.c_net.output);
            if want != got {
                return Err(TrainError::Config(format!(
                    "slot {k}: parameters have (obs, incoming, actions, bits) = {got:?}, environment needs {want:?}"
                )));
            }
        }
        Ok(Self::assemble(config, discretizer, channel, env, layout, slots))
    }

    fn assemble(
        config: TrainerConfig,
        discretizer: DiscretizerConfig,
        channel: ChannelConfig,
        env: E,
        layout: EnvLayout,
        slots: Vec<AgentParams>,
    ) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate).with_clip(config.clip_norm);
        Self {
            train_rngs: RolloutRngs::train(config.seed),
            eval_rngs: RolloutRngs::eval(config.seed),
            optimizer,
            config,
            discretizer,
            channel,
            env,
            layout,
            slots,
            iteration: 0,
            amplitude_ewma: metrics::Ewma::new(AMPLITUDE_EWMA_ALPHA),
            window: (0.0, 0),
            history: Vec::new(),
        }
    }

    pub fn layout(&self) -> &EnvLayout {
        &self.layout
    }

    fn ctx(&self, mode: Mode) -> rollout::Ctx<'_, E> {
        rollout::Ctx {
            env: &self.env,
            layout: &self.layout,
            slots: &self.slots,
            sharing: self.config.parameter_sharing,
            discretizer: self.discretizer.with_mode(mode),
            channel: &self.channel,
            channel_active: match mode {
                Mode::Train => self.channel.during_training,
                Mode::Eval => self.channel.during_eval,
            },
            ablate: self.config.ablate_messages,
            gamma: self.config.gamma,
        }
    }

    /// Builds the training graph for one batch of episodes and returns the
    /// scalar loss without stepping the optimizer. Exposed for gradient
    /// probes.
    pub fn loss_graph(&mut self, graph: &mut Graph, epsilon: f64) -> Result<rollout::LossGraph> {
        let bound = rollout::bind_all(&self.slots, graph);
        let mut rngs = self.train_rngs.clone();
        let ctx = self.ctx(Mode::Train);
        let out = rollout::rollout(
            &ctx,
            graph,
            &bound,
            epsilon,
            self.config.episodes_per_iteration,
            &mut rngs,
            false,
        )?;
        let loss = rollout::td_loss(&ctx, graph, &out)?;
        self.train_rngs = rngs;
        Ok(rollout::LossGraph {
            loss,
            bound,
            amplitude: out.amplitude(),
            mean_return: mean_std(&out.returns).0,
        })
    }

    /// One optimizer step on fresh episodes, then the target update. Runs
    /// an evaluation when the iteration count hits the cadence.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let epsilon = self.config.epsilon(self.iteration);
        let mut graph = Graph::new();
        let lg = self.loss_graph(&mut graph, epsilon)?;
        let loss = graph.value(lg.loss).data()[0];
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: self.iteration,
                loss,
                detail: format!(
                    "amplitude {:?}, mean train return {}, epsilon {epsilon}",
                    lg.amplitude, lg.mean_return
                ),
            });
        }
        graph.backward(lg.loss)?;
        for (slot, (a, c)) in self.slots.iter_mut().zip(&lg.bound) {
            slot.a_net.params.accumulate_grads(&graph, a);
            slot.c_net.params.accumulate_grads(&graph, c);
        }
        drop(graph);
        let stats = {
            let mut sets: Vec<_> = self
                .slots
                .iter_mut()
                .flat_map(|s| [&mut s.a_net.params, &mut s.c_net.params])
                .collect();
            self.optimizer.step(&mut sets)?
        };
        for s in &mut self.slots {
            s.soft_update()?;
        }
        self.iteration += 1;
        if let Some(a) = lg.amplitude {
            self.amplitude_ewma.push(a);
            self.window.0 += a;
            self.window.1 += 1;
        }
        if self.iteration.is_multiple_of(self.config.eval_every) {
            self.record_eval()?;
        }
        Ok(IterationStats {
            iteration: self.iteration,
            loss,
            amplitude: lg.amplitude,
            grad_norm: stats.grad_norm,
            mean_train_return: lg.mean_return,
            epsilon,
        })
    }

    fn record_eval(&mut self) -> Result<()> {
        let eval = self.evaluate()?;
        let (sum, n) = std::mem::take(&mut self.window);
        let amp = if n > 0 { sum / n as f64 } else { 0.0 };
        self.history.push(MetricsRecord {
            iteration: self.iteration,
            mean_eval_return: eval.mean,
            return_std: eval.std,
            comm_amplitude: amp,
            amplitude_ewma: self.amplitude_ewma.value.unwrap_or(0.0),
        });
        Ok(())
    }

    /// Runs the remaining iterations, stopping at the first error.
    pub fn train(&mut self) -> Result<()> {
        self.train_with(|_| {})
    }

    pub fn train_with<F: FnMut(&IterationStats)>(&mut self, mut progress: F) -> Result<()> {
        while self.iteration < self.config.iterations {
            let stats = self.train_iteration()?;
            progress(&stats);
        }
        Ok(())
    }

    /// `eval_episodes` greedy episodes with evaluation-mode discretizers
    /// on the run's evaluation streams. Parameters are not touched.
    pub fn evaluate(&mut self) -> Result<EvalResult> {
        let mut rngs = self.eval_rngs.clone();
        let r = self.evaluate_with(self.config.eval_episodes, &mut rngs, false);
        self.eval_rngs = rngs;
        r
    }

    pub fn evaluate_with(&self, episodes: usize, rngs: &mut RolloutRngs, trace: bool) -> Result<EvalResult> {
        if episodes == 0 {
            return Err(TrainError::Config("evaluation needs at least one episode".into()));
        }
        let mut graph = Graph::new();
        let bound = rollout::bind_all(&self.slots, &mut graph);
        let ctx = self.ctx(Mode::Eval);
        let out = rollout::rollout(&ctx, &mut graph, &bound, 0.0, episodes, rngs, trace)?;
        let (mean, std) = mean_std(&out.returns);
        Ok(EvalResult {
            returns: out.returns,
            mean,
            std,
            trace: out.trace,
        })
    }
}

fn check_layout(layout: &EnvLayout, sharing: bool) -> Result<()> {
    if layout.horizon == 0 || layout.n_actions == 0 || layout.message_bits == 0 {
        return Err(TrainError::Config(
            "environment needs a positive horizon, action count and message width".into(),
        ));
    }
    if layout.obs_dims.len() != layout.n_agents {
        return Err(TrainError::Config("one observation width per agent required".into()));
    }
    if sharing {
        let d0 = (layout.obs_dims[0], layout.incoming_dim(0));
        if (0..layout.n_agents).any(|a| (layout.obs_dims[a], layout.incoming_dim(a)) != d0) {
            return Err(TrainError::Config(
                "parameter sharing needs identical observation and message widths for all agents".into(),
            ));
        }
    }
    Ok(())
}
