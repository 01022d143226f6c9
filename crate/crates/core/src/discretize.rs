//! Per-bit discretization units placed between a sender's C-Net and the
//! channel.
//!
//! | unit   | train forward          | backward rule              | eval forward     |
//! |--------|------------------------|----------------------------|------------------|
//! | STE    | `H(x)`                 | identity                   | `H(x)`           |
//! | DRU    | `σ(x+n)`               | `d/dx σ(x+n)`              | `H(x)`           |
//! | GS     | relaxed 2-class sample | its exact derivative       | Gumbel-max bit   |
//! | ST-DRU | `H(x+n)`               | `d/dx σ(x+n)`              | `H(x)`           |
//! | ST-GS  | Gumbel-max bit         | relaxed sample derivative  | Gumbel-max bit   |
//!
//! `n ~ N(0, σ_G²)` and the Gumbel pair `(g₁, g₂)` are drawn by the caller
//! and passed in through [`NoiseDraw`], so every output is a pure function
//! of its inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{sigmoid, Graph, Tensor, Var};

/// Lower/upper clamp applied to `σ(x)` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error("discretizer input is not finite: {0}")]
    NonFinite(f64),
    #[error("backward pass requested in evaluation mode")]
    BackwardInEval,
    #[error("noise draw covers {got} bits, input has {expected}")]
    NoiseLength { got: usize, expected: usize },
    #[error("invalid discretizer config: {0}")]
    InvalidConfig(String),
    #[error("unknown discretization method `{0}` (expected dru, ste, gs, st-dru or st-gs)")]
    UnknownKind(String),
}

type Result<T> = std::result::Result<T, DiscretizeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscretizerKind {
    #[serde(rename = "dru")]
    Dru,
    #[serde(rename = "ste")]
    Ste,
    #[serde(rename = "gs")]
    Gs,
    #[serde(rename = "st-dru")]
    StDru,
    #[serde(rename = "st-gs")]
    StGs,
}

impl DiscretizerKind {
    pub const ALL: [DiscretizerKind; 5] = [
        DiscretizerKind::Dru,
        DiscretizerKind::Ste,
        DiscretizerKind::Gs,
        DiscretizerKind::StDru,
        DiscretizerKind::StGs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscretizerKind::Dru => "dru",
            DiscretizerKind::Ste => "ste",
            DiscretizerKind::Gs => "gs",
            DiscretizerKind::StDru => "st-dru",
            DiscretizerKind::StGs => "st-gs",
        }
    }

    fn uses_gaussian(self) -> bool {
        matches!(self, DiscretizerKind::Dru | DiscretizerKind::StDru)
    }

    fn uses_gumbel(self) -> bool {
        matches!(self, DiscretizerKind::Gs | DiscretizerKind::StGs)
    }
}

impl fmt::Display for DiscretizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscretizerKind {
    type Err = DiscretizeError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        DiscretizerKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| DiscretizeError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl FromStr for Mode {
    type Err = DiscretizeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(DiscretizeError::InvalidConfig(format!(
                "unknown mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerConfig {
    pub kind: DiscretizerKind,
    /// Standard deviation of the Gaussian noise used by DRU and ST-DRU.
    pub sigma_g: f64,
    /// Softmax temperature of GS and ST-GS.
    pub tau_gs: f64,
    pub mode: Mode,
}

impl DiscretizerConfig {
    pub fn new(kind: DiscretizerKind) -> Self {
        Self {
            kind,
            sigma_g: 2.0,
            tau_gs: 1.0,
            mode: Mode::Train,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_g >= 0.0 && self.sigma_g.is_finite()) {
            return Err(DiscretizeError::InvalidConfig(format!(
                "sigma_g must be >= 0, got {}",
                self.sigma_g
            )));
        }
        if !(self.tau_gs > 0.0 && self.tau_gs.is_finite()) {
            return Err(DiscretizeError::InvalidConfig(format!(
                "tau_gs must be > 0, got {}",
                self.tau_gs
            )));
        }
        Ok(())
    }
}

/// Noise for a block of bits. Unused components are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseDraw {
    pub gaussian: Vec<f64>,
    pub gumbel: Vec<(f64, f64)>,
}

/// `-ln(-ln(u))` for `u` in (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    gumbel_from_uniform(u)
}

impl NoiseDraw {
    pub fn zeros(bits: usize) -> Self {
        Self {
            gaussian: vec![0.0; bits],
            gumbel: vec![(0.0, 0.0); bits],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussian.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian.is_empty()
    }

    /// Draws independent noise for `bits` positions, sampling only the
    /// components `config.kind` consumes.
    pub fn sample<R: Rng + ?Sized>(config: &DiscretizerConfig, bits: usize, rng: &mut R) -> Self {
        let mut draw = Self::zeros(bits);
        if config.kind.uses_gaussian() {
            for n in &mut draw.gaussian {
                let z: f64 = StandardNormal.sample(rng);
                *n = config.sigma_g * z;
            }
        }
        if config.kind.uses_gumbel() {
            for g in &mut draw.gumbel {
                *g = (sample_gumbel(rng), sample_gumbel(rng));
            }
        }
        draw
    }
}

/// Heaviside step with `H(0) = 1`.
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn clamped_sigmoid(x: f64) -> (f64, bool) {
    let s = sigmoid(x);
    if s < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if s > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (s, false)
    }
}

/// Perturbed class scores `(log π₀ + g₁, log π₁ + g₂)` with `π₀ = σ(x)`.
fn gumbel_scores(x: f64, g: (f64, f64)) -> (f64, f64) {
    let (p, _) = clamped_sigmoid(x);
    (p.ln() + g.0, (1.0 - p).ln() + g.1)
}

/// First component of the tempered softmax over the perturbed scores.
pub fn gumbel_softmax(x: f64, g: (f64, f64), tau: f64) -> f64 {
    let (a, b) = gumbel_scores(x, g);
    sigmoid((a - b) / tau)
}

/// `d/dx` of [`gumbel_softmax`]; zero where the probability clamp is active.
pub fn gumbel_softmax_grad(x: f64, g: (f64, f64), tau: f64) -> f64 {
    let (p, clamped) = clamped_sigmoid(x);
    if clamped {
        return 0.0;
    }
    let m = gumbel_softmax(x, g, tau);
    // d/dx [log σ(x) - log(1 - σ(x))] = (1 - σ) + σ = 1
    let dscore = (1.0 - p) + p;
    m * (1.0 - m) * dscore / tau
}

/// First component of `one_hot(argmax_i(g_i + log π_i))`; ties go to class 0.
pub fn gumbel_max(x: f64, g: (f64, f64)) -> f64 {
    let (a, b) = gumbel_scores(x, g);
    if a >= b {
        1.0
    } else {
        0.0
    }
}

fn sigmoid_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// Output of one bit for the given mode.
pub fn forward_bit(config: &DiscretizerConfig, x: f64, n: f64, g: (f64, f64)) -> Result<f64> {
    if !x.is_finite() {
        return Err(DiscretizeError::NonFinite(x));
    }
    use DiscretizerKind::*;
    Ok(match (config.mode, config.kind) {
        (Mode::Eval, Ste | Dru | StDru) => heaviside(x),
        (Mode::Eval, Gs | StGs) => gumbel_max(x, g),
        (Mode::Train, Ste) => heaviside(x),
        (Mode::Train, Dru) => sigmoid(x + n),
        (Mode::Train, StDru) => heaviside(x + n),
        (Mode::Train, Gs) => gumbel_softmax(x, g, config.tau_gs),
        (Mode::Train, StGs) => gumbel_max(x, g),
    })
}

/// Gradient reaching `x` for one bit given the upstream gradient at the output.
pub fn discretize_backward(
    config: &DiscretizerConfig,
    x: f64,
    n: f64,
    g: (f64, f64),
    upstream: f64,
) -> Result<f64> {
    if config.mode == Mode::Eval {
        return Err(DiscretizeError::BackwardInEval);
    }
    if !x.is_finite() {
        return Err(DiscretizeError::NonFinite(x));
    }
    Ok(backward_bit(config, x, n, g) * upstream)
}

fn backward_bit(config: &DiscretizerConfig, x: f64, n: f64, g: (f64, f64)) -> f64 {
    use DiscretizerKind::*;
    match config.kind {
        Ste => 1.0,
        Dru | StDru => sigmoid_grad(x + n),
        Gs | StGs => gumbel_softmax_grad(x, g, config.tau_gs),
    }
}

/// Applies the unit elementwise to plain values.
pub fn discretize_values(config: &DiscretizerConfig, xs: &[f64], noise: &NoiseDraw) -> Result<Vec<f64>> {
    if noise.len() != xs.len() || noise.gumbel.len() != xs.len() {
        return Err(DiscretizeError::NoiseLength {
            got: noise.len(),
            expected: xs.len(),
        });
    }
    xs.iter()
        .enumerate()
        .map(|(k, &x)| forward_bit(config, x, noise.gaussian[k], noise.gumbel[k]))
        .collect()
}

/// Applies the unit elementwise to every entry of `x`.
///
/// In train mode the result is a custom graph node whose backward rule is
/// the unit's declared backward function. In eval mode the result is a
/// constant: no gradient is ever routed through an evaluation-mode unit.
pub fn discretize(graph: &mut Graph, config: &DiscretizerConfig, x: Var, noise: NoiseDraw) -> Result<Var> {
    let input = graph.value(x);
    let (rows, cols) = input.shape();
    let out = discretize_values(config, input.data(), &noise)?;
    let out = Tensor::from_vec(rows, cols, out);
    if config.mode == Mode::Eval {
        return Ok(graph.constant(out));
    }
    let cfg = *config;
    Ok(graph.custom_op(
        &[x],
        move |_| out,
        move |up, ins, _| {
            let xs = ins[0].data();
            let grad = xs
                .iter()
                .zip(up)
                .enumerate()
                .map(|(k, (&xv, &u))| u * backward_bit(&cfg, xv, noise.gaussian[k], noise.gumbel[k]))
                .collect();
            vec![grad]
        },
    ))
}

/// Empirical response of a unit to a fixed input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseHistogram {
    pub kind: DiscretizerKind,
    pub mode: Mode,
    pub x: f64,
    pub samples: usize,
    /// Counts over equal-width bins covering [0, 1]; 1.0 falls in the last bin.
    pub bins: Vec<u64>,
    pub exact_zeros: u64,
    pub exact_ones: u64,
}

impl ResponseHistogram {
    pub fn fraction_ones(&self) -> f64 {
        self.exact_ones as f64 / self.samples as f64
    }

    pub fn fraction_zeros(&self) -> f64 {
        self.exact_zeros as f64 / self.samples as f64
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let w = 1.0 / self.bins.len() as f64;
        (0..self.bins.len())
            .map(|i| (i as f64 * w, (i + 1) as f64 * w))
            .collect()
    }
}

/// Runs the unit `samples` times on `x` with fresh noise per sample.
pub fn response_histogram<R: Rng + ?Sized>(
    config: &DiscretizerConfig,
    x: f64,
    samples: usize,
    n_bins: usize,
    rng: &mut R,
) -> Result<ResponseHistogram> {
    config.validate()?;
    if samples == 0 || n_bins == 0 {
        return Err(DiscretizeError::InvalidConfig(
            "histogram needs at least one sample and one bin".into(),
        ));
    }
    let mut hist = ResponseHistogram {
        kind: config.kind,
        mode: config.mode,
        x,
        samples,
        bins: vec![0; n_bins],
        exact_zeros: 0,
        exact_ones: 0,
    };
    for _ in 0..samples {
        let noise = NoiseDraw::sample(config, 1, rng);
        let m = forward_bit(config, x, noise.gaussian[0], noise.gumbel[0])?;
        let bin = ((m * n_bins as f64) as usize).min(n_bins - 1);
        hist.bins[bin] += 1;
        if m == 0.0 {
            hist.exact_zeros += 1;
        } else if m == 1.0 {
            hist.exact_ones += 1;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    use super::*;
    use DiscretizerKind::*;

    fn cfg(kind: DiscretizerKind, mode: Mode) -> DiscretizerConfig {
        DiscretizerConfig::new(kind).with_mode(mode)
    }

    fn out(kind: DiscretizerKind, mode: Mode, x: f64, n: f64, g: (f64, f64)) -> f64 {
        forward_bit(&cfg(kind, mode), x, n, g).unwrap()
    }

    #[test]
    fn table_examples() {
        assert_eq!(out(Dru, Mode::Train, 0.0, 0.0, (0.0, 0.0)), 0.5);
        assert_eq!(out(Dru, Mode::Eval, -0.1, 0.0, (0.0, 0.0)), 0.0);
        assert_eq!(out(Ste, Mode::Train, 0.7, 0.0, (0.0, 0.0)), 1.0);
        assert_eq!(out(StDru, Mode::Train, 1.0, -1.5, (0.0, 0.0)), 0.0);
        assert_eq!(out(Gs, Mode::Train, 0.0, 0.0, (0.3, 0.3)), 0.5);
    }

    #[test]
    fn backward_examples() {
        let dru = cfg(Dru, Mode::Train);
        assert_eq!(discretize_backward(&dru, 0.0, 0.0, (0.0, 0.0), 1.0).unwrap(), 0.25);
        let stgs = cfg(StGs, Mode::Train);
        assert!((discretize_backward(&stgs, 0.0, 0.0, (0.4, 0.4), 1.0).unwrap() - 0.25).abs() < 1e-15);
        let ste = cfg(Ste, Mode::Train);
        assert_eq!(discretize_backward(&ste, -5.0, 0.0, (0.0, 0.0), -2.0).unwrap(), -2.0);
    }

    #[test]
    fn backward_rejected_in_eval() {
        for kind in DiscretizerKind::ALL {
            assert_eq!(
                discretize_backward(&cfg(kind, Mode::Eval), 0.3, 0.0, (0.0, 0.0), 1.0),
                Err(DiscretizeError::BackwardInEval)
            );
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        for kind in DiscretizerKind::ALL {
            for mode in [Mode::Train, Mode::Eval] {
                assert!(matches!(
                    forward_bit(&cfg(kind, mode), f64::NAN, 0.0, (0.0, 0.0)),
                    Err(DiscretizeError::NonFinite(_))
                ));
            }
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let c = cfg(Gs, Mode::Train);
        for x in [-800.0, -40.0, 40.0, 800.0] {
            let m = forward_bit(&c, x, 0.0, (0.1, -0.2)).unwrap();
            assert!(m.is_finite());
            assert_eq!(gumbel_softmax_grad(x, (0.1, -0.2), 1.0), 0.0);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ST-GS".parse::<DiscretizerKind>().unwrap(), StGs);
        assert_eq!("st_dru".parse::<DiscretizerKind>().unwrap(), StDru);
        assert!("sigmoid".parse::<DiscretizerKind>().is_err());
    }

    #[test]
    fn graph_node_uses_declared_backward() {
        let c = cfg(StDru, Mode::Train);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0, 1.0]));
        let noise = NoiseDraw {
            gaussian: vec![0.0, -1.5],
            gumbel: vec![(0.0, 0.0); 2],
        };
        let m = discretize(&mut g, &c, x, noise).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[0], 0.25);
        assert_eq!(grad[1], sigmoid_grad(-0.5));
    }

    #[test]
    fn eval_node_is_constant() {
        let c = cfg(Dru, Mode::Eval);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.2, -0.2]));
        let m = discretize(&mut g, &c, x, NoiseDraw::zeros(2)).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn histogram_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = response_histogram(&cfg(Dru, Mode::Eval), 2.0, 10_000, 20, &mut rng).unwrap();
        assert_eq!(h.exact_ones, 10_000);
        let h = response_histogram(&cfg(Ste, Mode::Train), -0.1, 10_000, 20, &mut rng).unwrap();
        assert_eq!(h.exact_zeros, 10_000);
        assert_eq!(h.bins[0], 10_000);

        let phi1 = Normal::new(0.0, 1.0).unwrap().cdf(1.0);
        let h = response_histogram(&cfg(StDru, Mode::Train), 2.0, 10_000, 20, &mut rng).unwrap();
        assert!((h.fraction_ones() - phi1).abs() < 0.02, "{}", h.fraction_ones());
    }

    #[test]
    fn gumbel_max_marginal_matches_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [Gs, StGs] {
            let h = response_histogram(&cfg(kind, Mode::Eval), 2.0, 10_000, 2, &mut rng).unwrap();
            assert!((h.fraction_ones() - 0.8808).abs() < 0.02);
            assert_eq!(h.exact_ones + h.exact_zeros, 10_000);
        }
    }

    #[test]
    fn noise_only_for_consuming_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = NoiseDraw::sample(&cfg(Ste, Mode::Train), 3, &mut rng);
        assert_eq!(d, NoiseDraw::zeros(3));
        let d = NoiseDraw::sample(&cfg(Dru, Mode::Train), 3, &mut rng);
        assert!(d.gaussian.iter().all(|n| *n != 0.0));
        assert!(d.gumbel.iter().all(|g| *g == (0.0, 0.0)));
    }
}
