//! Episodic multi-agent environments and the bit-flip channel.

pub mod channel;
pub mod matrix;
pub mod speaker_listener;

use thiserror::Error;

pub use channel::{apply_flips, channel_apply, sample_flips, ChannelConfig};
pub use matrix::{matrix_reset, matrix_step, MatrixConfig, MatrixEnv};
pub use speaker_listener::{sl_reset, sl_step, SpeakerListenerConfig, SpeakerListenerEnv};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("invalid action index {0}")]
    InvalidAction(usize),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("wrong phase: expected {expected}, found {found}")]
    WrongPhase { expected: &'static str, found: String },
    #[error("environment used before reset")]
    NotReset,
}

/// Static wiring of an environment: who talks, who acts, and input widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvLayout {
    pub n_agents: usize,
    pub obs_dims: Vec<usize>,
    /// Action count shared by every acting agent.
    pub n_actions: usize,
    pub message_bits: usize,
    /// Agents that broadcast a message each step, in increasing order.
    pub senders: Vec<usize>,
    /// Agents that pick an action each step, in increasing order.
    pub actors: Vec<usize>,
    /// Steps per episode; every episode lasts exactly this long.
    pub horizon: usize,
}

impl EnvLayout {
    /// Senders whose messages reach `receiver`, by sender index, self excluded.
    pub fn incoming_senders(&self, receiver: usize) -> Vec<usize> {
        self.senders.iter().copied().filter(|&s| s != receiver).collect()
    }

    pub fn incoming_dim(&self, receiver: usize) -> usize {
        self.incoming_senders(receiver).len() * self.message_bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Team reward shared by all agents.
    pub reward: f64,
    pub done: bool,
}

/// One step: every sender emits a message from its observation, messages
/// are delivered, then every actor chooses an action from its observation
/// and the messages it received.
pub trait MultiAgentEnv: Clone {
    fn layout(&self) -> EnvLayout;
    fn reset(&mut self, rng: &mut dyn rand::RngCore);
    /// Appends the observation of `agent` to `out`.
    fn observe(&self, agent: usize, out: &mut Vec<f64>);
    /// Hands the broadcast (pre-channel) messages to the environment.
    fn deliver(&mut self, messages: Vec<Vec<f64>>) -> Result<(), EnvError>;
    /// `actions` are ordered like [`EnvLayout::actors`].
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError>;
    /// The discrete input the agent is meant to communicate, if any.
    fn input_label(&self, agent: usize) -> Option<usize>;
    fn max_return(&self) -> Option<f64>;
}
