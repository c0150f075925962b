use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::RunRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Whether a forward pass samples dropout masks.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut RunRng },
}

impl Mode<'_> {
    pub(crate) fn dropout(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => g.dropout(x, *dropout, &mut **rng),
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::Contract(format!("adjacency must be square, got {n}x{m}")));
    }
    if a.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Contract("adjacency has negative entries".into()));
    }
    let with_loops = Tensor::from_fn(n, n, |i, j| a.get(i, j) + if i == j { 1.0 } else { 0.0 });
    let inv_sqrt_deg: Vec<f64> = with_loops
        .row_iter()
        .map(|row| 1.0 / row.iter().sum::<f64>().sqrt())
        .collect();
    Ok(Tensor::from_fn(n, n, |i, j| {
        inv_sqrt_deg[i] * with_loops.get(i, j) * inv_sqrt_deg[j]
    }))
}

/// Population graph used by the GCN layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Adjacency {
    /// Identity population graph: normalization leaves it unchanged, so the
    /// propagation step is skipped and any population size is accepted.
    Identity,
    Normalized(Tensor),
}

impl Adjacency {
    pub fn from_raw(a: &Tensor) -> Result<Self> {
        Ok(Adjacency::Normalized(normalize_adjacency(a)?))
    }

    /// `Â · X` for a node `x` of shape `n × d`.
    fn propagate(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Adjacency::Identity => Ok(x),
            Adjacency::Normalized(a) => {
                let a = g.constant(a.clone());
                g.matmul(a, x)
            }
        }
    }
}

/// One bias-free graph convolution `act(Â F W)`, optionally followed by dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
    pub dropout: bool,
}

impl GcnLayer {
    pub fn new(weight: Tensor, activation: Activation, dropout: bool) -> Self {
        GcnLayer {
            weight,
            activation,
            dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Standalone forward pass on tensors.
    pub fn forward(&self, features: &Tensor, adjacency: &Adjacency, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let w = g.constant(self.weight.clone());
        let out = gcn_forward(&mut g, w, x, adjacency, self.activation, self.dropout, mode)?;
        Ok(g.value(out).clone())
    }
}

/// Records one graph convolution on `g`. The propagation is applied on the
/// narrower side of `F W` to keep the product cheap.
pub fn gcn_forward(
    g: &mut Graph,
    weight: NodeId,
    features: NodeId,
    adjacency: &Adjacency,
    activation: Activation,
    dropout: bool,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    let (n, in_dim) = g.value(features).shape();
    let (w_in, out_dim) = g.value(weight).shape();
    if in_dim != w_in {
        return Err(Error::shape("gcn_forward", (n, in_dim), (w_in, out_dim)));
    }
    if let Adjacency::Normalized(a) = adjacency {
        if a.rows() != n {
            return Err(Error::shape("gcn_forward", a.shape(), (n, in_dim)));
        }
    }
    let pre = if in_dim <= out_dim {
        let af = adjacency.propagate(g, features)?;
        g.matmul(af, weight)?
    } else {
        let fw = g.matmul(features, weight)?;
        adjacency.propagate(g, fw)?
    };
    let out = activation.apply(g, pre)?;
    if dropout {
        mode.dropout(g, out)
    } else {
        Ok(out)
    }
}

/// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}
