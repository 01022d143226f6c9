//! Feed-forward A-Net / C-Net pairs, their target copies and action selection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Graph, ParamSet, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("empty q-value vector")]
    EmptyQValues,
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("{net} expects input width {expected}, got {got}")]
    InputWidth {
        net: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}

type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn a_net_default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }

    pub fn c_net_default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(NetError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(NetError::InvalidSpec("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-layer perceptron with a linear output layer. Parameters are named
/// `w0, b0, w1, b1, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub input: usize,
    pub output: usize,
    pub params: ParamSet,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut fan_in = input;
        let widths: Vec<usize> = spec.hidden.iter().copied().chain([output]).collect();
        for (l, &w) in widths.iter().enumerate() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let weights = (0..fan_in * w).map(|_| rng.gen_range(-bound..=bound)).collect();
            let biases = (0..w).map(|_| rng.gen_range(-bound..=bound)).collect();
            params.push(format!("w{l}"), Tensor::from_vec(fan_in, w, weights));
            params.push(format!("b{l}"), Tensor::from_vec(1, w, biases));
            fan_in = w;
        }
        Ok(Self {
            spec,
            input,
            output,
            params,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        z
    }

    fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.bind(graph)
    }

    pub fn forward(&self, graph: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let got = graph.value(x).cols();
        if got != self.input {
            return Err(NetError::InputWidth {
                net: "mlp",
                expected: self.input,
                got,
            });
        }
        let mut h = x;
        let last = self.n_layers() - 1;
        for l in 0..=last {
            h = graph.affine(h, bound[2 * l], bound[2 * l + 1])?;
            if l < last {
                h = match self.spec.activation {
                    Activation::Tanh => graph.tanh(h),
                    Activation::Relu => graph.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Graph-free forward pass; numerically identical to [`Mlp::forward`].
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input {
            return Err(NetError::InputWidth {
                net: "mlp",
                expected: self.input,
                got: x.cols(),
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Live and target networks of one agent (or of all agents under
/// parameter sharing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub a_net: Mlp,
    pub c_net: Mlp,
    pub a_target: Mlp,
    pub c_target: Mlp,
    pub tau_target: f64,
}

impl AgentParams {
    /// The A-Net reads `[observation, incoming messages]` and emits one
    /// Q-value per action; the C-Net reads the observation and emits one
    /// logit per message bit. Targets start as exact copies.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        a_spec: MlpSpec,
        c_spec: MlpSpec,
        obs_dim: usize,
        incoming_dim: usize,
        n_actions: usize,
        message_bits: usize,
        tau_target: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(tau_target > 0.0 && tau_target <= 1.0) {
            return Err(NetError::InvalidSpec(format!(
                "tau_target must lie in (0, 1], got {tau_target}"
            )));
        }
        let a_net = Mlp::new(a_spec, obs_dim + incoming_dim, n_actions, rng)?;
        let c_net = Mlp::new(c_spec, obs_dim, message_bits, rng)?;
        Ok(Self {
            a_target: a_net.clone(),
            c_target: c_net.clone(),
            a_net,
            c_net,
            tau_target,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.c_net.input
    }

    pub fn incoming_dim(&self) -> usize {
        self.a_net.input - self.c_net.input
    }

    /// `θ⁻ <- τ θ + (1 - τ) θ⁻` for both networks.
    pub fn soft_update(&mut self) -> Result<()> {
        self.a_target.params.blend_from(&self.a_net.params, self.tau_target)?;
        self.c_target.params.blend_from(&self.c_net.params, self.tau_target)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.a_net.params.zero_grad();
        self.c_net.params.zero_grad();
    }
}

/// Q-values for a block of rows: `observation` is `rows x obs_dim`,
/// `incoming` is `rows x incoming_dim`.
pub fn a_net_forward(
    net: &Mlp,
    graph: &mut Graph,
    bound: &[Var],
    observation: Var,
    incoming: Var,
) -> Result<Var> {
    let (o, m) = (graph.value(observation).cols(), graph.value(incoming).cols());
    if o + m != net.input {
        return Err(NetError::InputWidth {
            net: "a_net",
            expected: net.input,
            got: o + m,
        });
    }
    let x = graph.concat_cols(observation, incoming)?;
    net.forward(graph, bound, x)
}

/// Message logits for a block of observations.
pub fn c_net_forward(net: &Mlp, graph: &mut Graph, bound: &[Var], observation: Var) -> Result<Var> {
    let got = graph.value(observation).cols();
    if got != net.input {
        return Err(NetError::InputWidth {
            net: "c_net",
            expected: net.input,
            got,
        });
    }
    net.forward(graph, bound, observation)
}

/// Greedy action (lowest index on ties) with probability `1 - epsilon`,
/// otherwise a uniform random action. No randomness is consumed when
/// `epsilon == 0`.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q_values.is_empty() {
        return Err(NetError::EmptyQValues);
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(NetError::InvalidEpsilon(epsilon));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..q_values.len()));
    }
    Ok(crate::gradcore::argmax(q_values))
}
