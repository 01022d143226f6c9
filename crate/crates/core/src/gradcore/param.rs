use serde::{Deserialize, Serialize};

use super::{Graph, GradError, Result, Tensor, Var};

/// Equality compares name and value; the gradient buffer is scratch space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.value == other.value
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of named trainable tensors. Iteration follows
/// insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param::new(name, value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone()))
            .collect()
    }

    /// Adds the gradients the graph accumulated at `bound` (from [`ParamSet::bind`]).
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if p.grad.len() != p.value.len() {
                p.grad = vec![0.0; p.value.len()];
            }
            if let Some(g) = graph.grad(v) {
                for (d, s) in p.grad.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.clear();
            p.grad.resize(p.value.len(), 0.0);
        }
    }

    /// Sum of squared gradient entries.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(GradError::ParamMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(GradError::ParamMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self <- tau * source + (1 - tau) * self`, elementwise.
    pub fn blend_from(&mut self, source: &ParamSet, tau: f64) -> Result<()> {
        self.check_aligned(source)?;
        for (dst, src) in self.params.iter_mut().zip(&source.params) {
            for (d, s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
        Ok(())
    }
}
