//! Empirical maps from environment input to emitted binary message.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::discretize::{discretize_values, DiscretizerConfig, Mode, NoiseDraw};
use crate::envs::{channel_apply, ChannelConfig, MatrixConfig};
use crate::nets::Mlp;

pub const MAX_PROTOCOL_BITS: usize = 16;

/// Counts of emitted messages per input. Column `j` is the bit pattern of
/// `j` written most significant bit first, so columns run in lexicographic
/// order of the message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMatrix {
    pub bits: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ProtocolMatrix {
    pub fn new(inputs: usize, bits: usize) -> Result<Self, TrainError> {
        if bits > MAX_PROTOCOL_BITS {
            return Err(TrainError::Config(format!(
                "protocol matrix supports at most {MAX_PROTOCOL_BITS} bits, got {bits}"
            )));
        }
        Ok(Self {
            bits,
            counts: vec![vec![0; 1 << bits]; inputs],
        })
    }

    pub fn columns(&self) -> usize {
        1 << self.bits
    }

    pub fn record(&mut self, input: usize, message: &[f64]) {
        self.counts[input][pattern_index(message)] += 1;
    }

    pub fn row_total(&self, input: usize) -> u64 {
        self.counts[input].iter().sum()
    }

    /// Patterns observed at least once for `input`.
    pub fn support(&self, input: usize) -> Vec<usize> {
        (0..self.columns()).filter(|&j| self.counts[input][j] > 0).collect()
    }

    /// Most frequent pattern for `input` (lowest index on ties).
    pub fn mode(&self, input: usize) -> usize {
        let row = &self.counts[input];
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn supports_disjoint(&self, a: usize, b: usize) -> bool {
        self.counts[a]
            .iter()
            .zip(&self.counts[b])
            .all(|(&x, &y)| x == 0 || y == 0)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        write!(out, "input")?;
        for j in 0..self.columns() {
            write!(out, ",{}", pattern_label(j, self.bits))?;
        }
        writeln!(out)?;
        for (i, row) in self.counts.iter().enumerate() {
            write!(out, "{i}")?;
            for c in row {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Index of a binary message read most significant bit first. Values
/// `>= 0.5` count as 1.
pub fn pattern_index(message: &[f64]) -> usize {
    message
        .iter()
        .fold(0, |acc, &v| (acc << 1) | usize::from(v >= 0.5))
}

pub fn pattern_label(index: usize, bits: usize) -> String {
    (0..bits)
        .rev()
        .map(|b| if (index >> b) & 1 == 1 { '1' } else { '0' })
        .collect()
}

pub fn hamming(a: usize, b: usize) -> u32 {
    (a ^ b).count_ones()
}

/// Tabulates `samples` messages per input, before and after `channel`.
pub fn tabulate<R, F>(
    inputs: usize,
    bits: usize,
    samples: usize,
    channel: &ChannelConfig,
    rng: &mut R,
    mut emit: F,
) -> Result<(ProtocolMatrix, ProtocolMatrix), TrainError>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> Result<Vec<f64>, TrainError>,
{
    let mut pre = ProtocolMatrix::new(inputs, bits)?;
    let mut post = ProtocolMatrix::new(inputs, bits)?;
    for input in 0..inputs {
        for _ in 0..samples {
            let m = emit(input, rng)?;
            if m.len() != bits {
                return Err(TrainError::Config(format!(
                    "message of {} bits, expected {bits}",
                    m.len()
                )));
            }
            pre.record(input, &m);
            post.record(input, &channel_apply(channel, &m, rng));
        }
    }
    Ok((pre, post))
}

/// Protocol of a Matrix C-Net in evaluation mode.
pub fn protocol_matrices<R: Rng + ?Sized>(
    c_net: &Mlp,
    env: &MatrixConfig,
    discretizer: &DiscretizerConfig,
    channel: &ChannelConfig,
    samples: usize,
    rng: &mut R,
) -> Result<(ProtocolMatrix, ProtocolMatrix), TrainError> {
    let bits = env.message_bits;
    if c_net.output != bits || c_net.input != env.obs_dim() {
        return Err(TrainError::Config(format!(
            "c_net maps {} -> {}, environment needs {} -> {bits}",
            c_net.input,
            c_net.output,
            env.obs_dim()
        )));
    }
    let disc = discretizer.with_mode(Mode::Eval);
    let logits: Vec<Vec<f64>> = (0..env.n_numbers)
        .map(|k| {
            let mut obs = Vec::new();
            env.encode(k, &mut obs);
            let x = crate::gradcore::Tensor::row(obs);
            Ok(c_net.forward_plain(&x)?.into_vec())
        })
        .collect::<Result<_, TrainError>>()?;
    tabulate(env.n_numbers, bits, samples, channel, rng, |input, rng| {
        let noise = NoiseDraw::sample(&disc, bits, rng);
        Ok(discretize_values(&disc, &logits[input], &noise)?)
    })
}
