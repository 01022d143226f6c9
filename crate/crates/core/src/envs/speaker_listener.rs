//! Speaker–listener navigation on a square arena. The speaker sees which
//! landmark is the target; the listener sees the landmarks relative to its
//! own position and must reach the target using the speaker's message.
//! Every step pays `-distance(listener, target)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvLayout, MultiAgentEnv, StepOutcome};

pub const SPEAKER: usize = 0;
pub const LISTENER: usize = 1;
pub const N_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerListenerConfig {
    pub n_landmarks: usize,
    pub half_width: f64,
    pub episode_length: usize,
    pub message_bits: usize,
    pub step_size: f64,
}

impl Default for SpeakerListenerConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 3,
            half_width: 1.0,
            episode_length: 25,
            message_bits: 2,
            step_size: 0.1,
        }
    }
}

impl SpeakerListenerConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_landmarks < 1 {
            return Err(EnvError::InvalidConfig("need at least one landmark".into()));
        }
        if !(self.half_width > 0.0) || !(self.step_size > 0.0) {
            return Err(EnvError::InvalidConfig(
                "half_width and step_size must be positive".into(),
            ));
        }
        if self.episode_length == 0 || self.message_bits == 0 {
            return Err(EnvError::InvalidConfig(
                "episode_length and message_bits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlAction {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl SlAction {
    pub const ALL: [SlAction; N_ACTIONS] = [
        SlAction::Noop,
        SlAction::Up,
        SlAction::Down,
        SlAction::Left,
        SlAction::Right,
    ];

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::InvalidAction(i))
    }

    fn delta(self) -> [f64; 2] {
        match self {
            SlAction::Noop => [0.0, 0.0],
            SlAction::Up => [0.0, 1.0],
            SlAction::Down => [0.0, -1.0],
            SlAction::Left => [-1.0, 0.0],
            SlAction::Right => [1.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlState {
    pub landmarks: Vec<[f64; 2]>,
    pub target: usize,
    pub listener: [f64; 2],
    pub t: usize,
}

impl SlState {
    pub fn target_position(&self) -> [f64; 2] {
        self.landmarks[self.target]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        dist(self.listener, p)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Landmarks uniform in the arena, uniform target, listener at the origin.
pub fn sl_reset<R: Rng + ?Sized>(config: &SpeakerListenerConfig, rng: &mut R) -> SlState {
    let hw = config.half_width;
    let landmarks = (0..config.n_landmarks)
        .map(|_| [rng.gen_range(-hw..=hw), rng.gen_range(-hw..=hw)])
        .collect();
    SlState {
        landmarks,
        target: rng.gen_range(0..config.n_landmarks),
        listener: [0.0, 0.0],
        t: 0,
    }
}

/// Moves the listener and returns `(reward, done)`.
pub fn sl_step(config: &SpeakerListenerConfig, state: &mut SlState, action: usize) -> Result<(f64, bool), EnvError> {
    let a = SlAction::from_index(action)?;
    if state.t >= config.episode_length {
        return Err(EnvError::WrongPhase {
            expected: "running episode",
            found: "finished episode".into(),
        });
    }
    let d = a.delta();
    let hw = config.half_width;
    for k in 0..2 {
        state.listener[k] = (state.listener[k] + config.step_size * d[k]).clamp(-hw, hw);
    }
    state.t += 1;
    let reward = -state.distance_to(state.target_position());
    Ok((reward, state.t == config.episode_length))
}

pub fn speaker_obs(config: &SpeakerListenerConfig, state: &SlState, out: &mut Vec<f64>) {
    out.extend((0..config.n_landmarks).map(|k| if k == state.target { 1.0 } else { 0.0 }));
}

pub fn listener_obs(state: &SlState, out: &mut Vec<f64>) {
    for l in &state.landmarks {
        out.push(l[0] - state.listener[0]);
        out.push(l[1] - state.listener[1]);
    }
}

/// Action that brings the listener closest to `goal` (noop on ties).
pub fn greedy_action(config: &SpeakerListenerConfig, state: &SlState, goal: [f64; 2]) -> usize {
    let hw = config.half_width;
    let mut best = (f64::INFINITY, 0);
    for a in SlAction::ALL {
        let d = a.delta();
        let p = [
            (state.listener[0] + config.step_size * d[0]).clamp(-hw, hw),
            (state.listener[1] + config.step_size * d[1]).clamp(-hw, hw),
        ];
        let dd = dist(p, goal);
        if dd < best.0 - 1e-12 {
            best = (dd, a as usize);
        }
    }
    best.1
}

/// Scripted listener policies used as reference points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScriptedListener {
    /// Knows the target and walks straight to it.
    Oracle,
    /// Ignores any message and walks to the landmark centroid.
    Centroid,
    /// Uniform random actions.
    Random,
}

/// Mean undiscounted return of a scripted listener over `episodes` episodes.
pub fn scripted_return<R: Rng + ?Sized>(
    config: &SpeakerListenerConfig,
    policy: ScriptedListener,
    episodes: usize,
    rng: &mut R,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = sl_reset(config, rng);
        loop {
            let a = match policy {
                ScriptedListener::Oracle => greedy_action(config, &s, s.target_position()),
                ScriptedListener::Centroid => {
                    let n = s.landmarks.len() as f64;
                    let c = [
                        s.landmarks.iter().map(|l| l[0]).sum::<f64>() / n,
                        s.landmarks.iter().map(|l| l[1]).sum::<f64>() / n,
                    ];
                    greedy_action(config, &s, c)
                }
                ScriptedListener::Random => rng.gen_range(0..N_ACTIONS),
            };
            let (r, done) = sl_step(config, &mut s, a).expect("valid scripted action");
            total += r;
            if done {
                break;
            }
        }
    }
    total / episodes as f64
}

#[derive(Clone, Debug)]
pub struct SpeakerListenerEnv {
    pub config: SpeakerListenerConfig,
    pub state: Option<SlState>,
}

impl SpeakerListenerEnv {
    pub fn new(config: SpeakerListenerConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
        })
    }
}

impl MultiAgentEnv for SpeakerListenerEnv {
    fn layout(&self) -> EnvLayout {
        EnvLayout {
            n_agents: 2,
            obs_dims: vec![self.config.n_landmarks, 2 * self.config.n_landmarks],
            n_actions: N_ACTIONS,
            message_bits: self.config.message_bits,
            senders: vec![SPEAKER],
            actors: vec![LISTENER],
            horizon: self.config.episode_length,
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) {
        self.state = Some(sl_reset(&self.config, rng));
    }

    fn observe(&self, agent: usize, out: &mut Vec<f64>) {
        let s = self.state.as_ref().expect("observe before reset");
        if agent == SPEAKER {
            speaker_obs(&self.config, s, out);
        } else {
            listener_obs(s, out);
        }
    }

    fn deliver(&mut self, _messages: Vec<Vec<f64>>) -> Result<(), EnvError> {
        Ok(())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        let [a] = actions else {
            return Err(EnvError::ActionCount {
                expected: 1,
                got: actions.len(),
            });
        };
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        let (reward, done) = sl_step(&self.config, state, *a)?;
        Ok(StepOutcome { reward, done })
    }

    fn input_label(&self, agent: usize) -> Option<usize> {
        (agent == SPEAKER).then(|| self.state.as_ref().map(|s| s.target)).flatten()
    }

    fn max_return(&self) -> Option<f64> {
        Some(0.0)
    }
}
