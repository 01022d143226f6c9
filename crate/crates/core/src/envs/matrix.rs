//! N agents each receive a number in `[0, M)`, broadcast one message, then
//! each declares whether everyone received the same number. The team reward
//! is the number of correct declarations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelConfig, EnvError, EnvLayout, MultiAgentEnv, StepOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsEncoding {
    /// One-hot when `M <= 16`, binary otherwise.
    Auto,
    OneHot,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub n_agents: usize,
    pub n_numbers: usize,
    pub message_bits: usize,
    pub error_probability: f64,
    pub max_bit_flips: usize,
    pub obs_encoding: ObsEncoding,
}

/// Smallest `b` with `2^b >= m`.
pub fn min_bits(m: usize) -> usize {
    let mut b = 0;
    while (1usize << b) < m {
        b += 1;
    }
    b
}

impl MatrixConfig {
    pub fn new(n_agents: usize, n_numbers: usize, message_bits: usize) -> Self {
        Self {
            n_agents,
            n_numbers,
            message_bits,
            error_probability: 0.0,
            max_bit_flips: 0,
            obs_encoding: ObsEncoding::Auto,
        }
    }

    pub fn simple() -> Self {
        Self::new(3, 4, 2)
    }

    pub fn complex() -> Self {
        Self::new(5, 256, 8)
    }

    /// N = 10, M = 2, three bits, one flip with probability 0.5.
    pub fn error_correction() -> Self {
        Self::new(10, 2, 3).with_errors(0.5, 1)
    }

    pub fn with_errors(mut self, error_probability: f64, max_bit_flips: usize) -> Self {
        self.error_probability = error_probability;
        self.max_bit_flips = max_bit_flips;
        self
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig::bit_flips(self.error_probability, self.max_bit_flips)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_agents < 2 {
            return Err(EnvError::InvalidConfig("matrix needs at least 2 agents".into()));
        }
        if self.n_numbers < 2 {
            return Err(EnvError::InvalidConfig("matrix needs at least 2 numbers".into()));
        }
        if self.message_bits == 0 {
            return Err(EnvError::InvalidConfig("message_bits must be positive".into()));
        }
        if self.error_probability == 0.0 && self.message_bits < min_bits(self.n_numbers) {
            return Err(EnvError::InvalidConfig(format!(
                "{} bits cannot encode {} numbers (need {})",
                self.message_bits,
                self.n_numbers,
                min_bits(self.n_numbers)
            )));
        }
        self.channel().validate(self.message_bits)
    }

    pub fn uses_one_hot(&self) -> bool {
        match self.obs_encoding {
            ObsEncoding::Auto => self.n_numbers <= 16,
            ObsEncoding::OneHot => true,
            ObsEncoding::Binary => false,
        }
    }

    pub fn obs_dim(&self) -> usize {
        if self.uses_one_hot() {
            self.n_numbers
        } else {
            min_bits(self.n_numbers)
        }
    }

    pub fn encode(&self, number: usize, out: &mut Vec<f64>) {
        if self.uses_one_hot() {
            out.extend((0..self.n_numbers).map(|k| if k == number { 1.0 } else { 0.0 }));
        } else {
            let bits = min_bits(self.n_numbers);
            out.extend((0..bits).rev().map(|b| ((number >> b) & 1) as f64));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Communicate,
    Act,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixAction {
    Same = 0,
    Different = 1,
}

impl MatrixAction {
    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        match i {
            0 => Ok(MatrixAction::Same),
            1 => Ok(MatrixAction::Different),
            other => Err(EnvError::InvalidAction(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub numbers: Vec<usize>,
    pub phase: Phase,
    pub pending: Vec<Vec<f64>>,
}

impl EpisodeState {
    pub fn all_same(&self) -> bool {
        self.numbers.windows(2).all(|w| w[0] == w[1])
    }

    /// Records the broadcast messages and opens the action phase.
    pub fn communicate(&mut self, messages: Vec<Vec<f64>>) -> Result<(), EnvError> {
        if self.phase != Phase::Communicate {
            return Err(EnvError::WrongPhase {
                expected: "communicate",
                found: format!("{:?}", self.phase),
            });
        }
        self.pending = messages;
        self.phase = Phase::Act;
        Ok(())
    }
}

/// Half of all episodes hand every agent the same uniform number; the rest
/// draw i.i.d. uniform numbers conditioned on not all being equal.
pub fn matrix_reset<R: Rng + ?Sized>(config: &MatrixConfig, rng: &mut R) -> EpisodeState {
    let (n, m) = (config.n_agents, config.n_numbers);
    let numbers = if rng.gen_bool(0.5) {
        vec![rng.gen_range(0..m); n]
    } else {
        loop {
            let draw: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            if draw.windows(2).any(|w| w[0] != w[1]) {
                break draw;
            }
        }
    };
    EpisodeState {
        numbers,
        phase: Phase::Communicate,
        pending: Vec::new(),
    }
}

/// Resolves the action phase and returns the team reward.
pub fn matrix_step(state: &mut EpisodeState, actions: &[MatrixAction]) -> Result<f64, EnvError> {
    if state.phase != Phase::Act {
        return Err(EnvError::WrongPhase {
            expected: "act",
            found: format!("{:?}", state.phase),
        });
    }
    if actions.len() != state.numbers.len() {
        return Err(EnvError::ActionCount {
            expected: state.numbers.len(),
            got: actions.len(),
        });
    }
    let truth = if state.all_same() {
        MatrixAction::Same
    } else {
        MatrixAction::Different
    };
    state.phase = Phase::Done;
    Ok(actions.iter().filter(|&&a| a == truth).count() as f64)
}

#[derive(Clone, Debug)]
pub struct MatrixEnv {
    pub config: MatrixConfig,
    pub state: Option<EpisodeState>,
}

impl MatrixEnv {
    pub fn new(config: MatrixConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
        })
    }

    fn state_mut(&mut self) -> Result<&mut EpisodeState, EnvError> {
        self.state.as_mut().ok_or(EnvError::NotReset)
    }
}

impl MultiAgentEnv for MatrixEnv {
    fn layout(&self) -> EnvLayout {
        let n = self.config.n_agents;
        EnvLayout {
            n_agents: n,
            obs_dims: vec![self.config.obs_dim(); n],
            n_actions: 2,
            message_bits: self.config.message_bits,
            senders: (0..n).collect(),
            actors: (0..n).collect(),
            horizon: 1,
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.state = Some(matrix_reset(&self.config, rng));
    }

    fn observe(&self, agent: usize, out: &mut Vec<f64>) {
        let number = self.state.as_ref().expect("observe before reset").numbers[agent];
        self.config.encode(number, out);
    }

    fn deliver(&mut self, messages: Vec<Vec<f64>>) -> Result<(), EnvError> {
        self.state_mut()?.communicate(messages)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        let acts = actions
            .iter()
            .map(|&a| MatrixAction::from_index(a))
            .collect::<Result<Vec<_>, _>>()?;
        let reward = matrix_step(self.state_mut()?, &acts)?;
        Ok(StepOutcome { reward, done: true })
    }

    fn input_label(&self, agent: usize) -> Option<usize> {
        self.state.as_ref().map(|s| s.numbers[agent])
    }

    fn max_return(&self) -> Option<f64> {
        Some(self.config.n_agents as f64)
    }
}
