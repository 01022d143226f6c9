use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// Bit-flip channel: with probability `error_probability` a message has
/// `flips_per_error` distinct, uniformly chosen positions inverted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub error_probability: f64,
    pub flips_per_error: usize,
    /// Corrupt messages during training rollouts.
    #[serde(default = "yes")]
    pub during_training: bool,
    /// Corrupt messages during evaluation episodes.
    #[serde(default = "yes")]
    pub during_eval: bool,
}

fn yes() -> bool {
    true
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl ChannelConfig {
    pub fn noiseless() -> Self {
        Self {
            error_probability: 0.0,
            flips_per_error: 0,
            during_training: true,
            during_eval: true,
        }
    }

    pub fn bit_flips(error_probability: f64, flips_per_error: usize) -> Self {
        Self {
            error_probability,
            flips_per_error,
            ..Self::noiseless()
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.error_probability == 0.0 || self.flips_per_error == 0
    }

    pub fn validate(&self, message_bits: usize) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.error_probability) {
            return Err(EnvError::InvalidConfig(format!(
                "error_probability must lie in [0, 1], got {}",
                self.error_probability
            )));
        }
        if self.flips_per_error > message_bits {
            return Err(EnvError::InvalidConfig(format!(
                "flips_per_error ({}) exceeds message_bits ({message_bits})",
                self.flips_per_error
            )));
        }
        Ok(())
    }
}

/// Positions to invert in a `bits`-wide message: either none or exactly
/// `flips_per_error` distinct indices in increasing order.
///
/// One uniform draw decides whether an error occurs; positions are drawn
/// only when it does. A noiseless channel consumes no randomness.
pub fn sample_flips<R: Rng + ?Sized>(config: &ChannelConfig, bits: usize, rng: &mut R) -> Vec<usize> {
    if config.is_noiseless() {
        return Vec::new();
    }
    if rng.gen::<f64>() >= config.error_probability {
        return Vec::new();
    }
    let mut idx = index::sample(rng, bits, config.flips_per_error.min(bits)).into_vec();
    idx.sort_unstable();
    idx
}

/// `v -> 1 - v` at the given positions; a bit flip on {0, 1} values.
pub fn apply_flips(message: &[f64], flips: &[usize]) -> Vec<f64> {
    let mut out = message.to_vec();
    for &i in flips {
        out[i] = 1.0 - out[i];
    }
    out
}

/// Passes one message through the channel.
pub fn channel_apply<R: Rng + ?Sized>(config: &ChannelConfig, message: &[f64], rng: &mut R) -> Vec<f64> {
    let flips = sample_flips(config, message.len(), rng);
    apply_flips(message, &flips)
}
