use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::gcn::{gcn_forward, glorot_uniform, Activation, Adjacency, GcnLayer, Mode};
use crate::diffmath::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, RunRng};

/// Widths of a generator: `input → hidden → latent` for the encoder and
/// `latent → hidden → output` for the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub output: usize,
}

impl ModelDims {
    pub fn new(input: usize, output: usize) -> Self {
        ModelDims {
            input,
            hidden: 100,
            latent: 50,
            output,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.latent == 0 || self.output == 0 {
            return Err(Error::Contract(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub const DISCRIMINATOR_WIDTHS: [usize; 3] = [32, 16, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    fn prefixes(self) -> (&'static str, &'static str) {
        match self {
            Role::Teacher => ("E^T", "D^T"),
            Role::Student => ("E^S", "D^S"),
        }
    }
}

/// GCN encoder-decoder. Every encoder layer and the hidden decoder layer use
/// ReLU and dropout; the decoder output layer uses `output_activation` and no
/// dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub role: Role,
    pub encoder: Vec<GcnLayer>,
    pub decoder: Vec<GcnLayer>,
}

/// Graph nodes holding a generator's weights for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub encoder: Vec<NodeId>,
    pub decoder: Vec<NodeId>,
}

impl BoundGenerator {
    pub fn weights(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.encoder.iter().chain(&self.decoder).copied()
    }
}

impl Generator {
    pub fn new(role: Role, dims: ModelDims, output_activation: Activation, rng: &mut RunRng) -> Result<Self> {
        dims.validate()?;
        let encoder = vec![
            GcnLayer::new(glorot_uniform(dims.input, dims.hidden, rng), Activation::Relu, true),
            GcnLayer::new(glorot_uniform(dims.hidden, dims.latent, rng), Activation::Relu, true),
        ];
        let decoder = vec![
            GcnLayer::new(glorot_uniform(dims.latent, dims.hidden, rng), Activation::Relu, true),
            GcnLayer::new(glorot_uniform(dims.hidden, dims.output, rng), output_activation, false),
        ];
        Ok(Generator {
            role,
            encoder,
            decoder,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.encoder[0].in_dim(),
            hidden: self.encoder[0].out_dim(),
            latent: self.encoder[self.encoder.len() - 1].out_dim(),
            output: self.decoder[self.decoder.len() - 1].out_dim(),
        }
    }

    pub fn output_activation(&self) -> Activation {
        self.decoder[self.decoder.len() - 1].activation
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            encoder: self.encoder.iter().map(|l| g.leaf(l.weight.clone(), trainable)).collect(),
            decoder: self.decoder.iter().map(|l| g.leaf(l.weight.clone(), trainable)).collect(),
        }
    }

    pub fn encode(&self, g: &mut Graph, bound: &BoundGenerator, x: NodeId, adj: &Adjacency, mode: &mut Mode<'_>) -> Result<NodeId> {
        run_stack(g, &self.encoder, &bound.encoder, x, adj, mode)
    }

    pub fn decode(&self, g: &mut Graph, bound: &BoundGenerator, z: NodeId, adj: &Adjacency, mode: &mut Mode<'_>) -> Result<NodeId> {
        run_stack(g, &self.decoder, &bound.decoder, z, adj, mode)
    }

    /// Evaluation-mode `(embedding, prediction)` for a feature matrix.
    pub fn infer(&self, features: &Tensor, adj: &Adjacency) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let z = self.encode(&mut g, &bound, x, adj, &mut Mode::Eval)?;
        let y = self.decode(&mut g, &bound, z, adj, &mut Mode::Eval)?;
        Ok((g.value(z).clone(), g.value(y).clone()))
    }

    /// Evaluation-mode decoder applied to a given embedding.
    pub fn decode_tensor(&self, z: &Tensor, adj: &Adjacency) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let z = g.constant(z.clone());
        let y = self.decode(&mut g, &bound, z, adj, &mut Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let (enc, dec) = self.role.prefixes();
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("{enc}.layer{}.W", i + 1), &l.weight));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("{dec}.layer{}.W", i + 1), &l.weight));
        }
        out
    }

    /// Same order as [`Generator::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .map(|l| &mut l.weight)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same weights under another role's tensor names.
    pub fn with_role(&self, role: Role) -> Generator {
        Generator {
            role,
            ..self.clone()
        }
    }
}

fn run_stack(
    g: &mut Graph,
    layers: &[GcnLayer],
    weights: &[NodeId],
    mut x: NodeId,
    adj: &Adjacency,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    for (layer, &w) in layers.iter().zip(weights) {
        x = gcn_forward(g, w, x, adj, layer.activation, layer.dropout, mode)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Dense discriminator with ReLU hidden layers and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub name: String,
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundDiscriminator {
    pub fn weights(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Discriminator {
    pub fn new(name: &str, input: usize, rng: &mut RunRng) -> Result<Self> {
        if input == 0 {
            return Err(Error::Contract("discriminator input width must be positive".into()));
        }
        let mut fan_in = input;
        let layers = DISCRIMINATOR_WIDTHS
            .iter()
            .map(|&width| {
                let layer = DenseLayer {
                    weight: glorot_uniform(fan_in, width, rng),
                    bias: Tensor::zeros(1, width),
                };
                fan_in = width;
                layer
            })
            .collect();
        Ok(Discriminator {
            name: name.to_string(),
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
                .collect(),
        }
    }

    /// Scores in (0, 1), one row per sample.
    pub fn forward(&self, g: &mut Graph, bound: &BoundDiscriminator, x: NodeId) -> Result<NodeId> {
        let last = bound.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            let lin = g.add_row(lin, b)?;
            h = if i == last { g.sigmoid(lin)? } else { g.relu(lin)? };
        }
        Ok(h)
    }

    pub fn score(&self, samples: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(samples.clone());
        let s = self.forward(&mut g, &bound, x)?;
        Ok(g.value(s).clone())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{}.layer{}.W", self.name, i + 1), &l.weight));
            out.push((format!("{}.layer{}.b", self.name, i + 1), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Teacher encoder-decoder plus its (variant-dependent) discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
}

impl Teacher {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.generator.named_tensors();
        if let Some(d) = &self.discriminator {
            out.extend(d.named_tensors());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Builds the teacher generator and the embedding-space alignment
/// discriminator `D_align`, seeded from `seed`.
pub fn build_teacher(dims: ModelDims, output_activation: Activation, seed: u64) -> Result<Teacher> {
    let generator = Generator::new(
        Role::Teacher,
        dims,
        output_activation,
        &mut rng::stream(seed, "teacher-init", 0),
    )?;
    let discriminator = Discriminator::new(
        "D_align",
        dims.latent,
        &mut rng::stream(seed, "discriminator-init", 0),
    )?;
    Ok(Teacher {
        generator,
        discriminator: Some(discriminator),
    })
}

pub fn build_student(dims: ModelDims, output_activation: Activation, seed: u64) -> Result<Generator> {
    Generator::new(
        Role::Student,
        dims,
        output_activation,
        &mut rng::stream(seed, "student-init", 0),
    )
}

/// Copies checkpoint tensors into `targets`, requiring exactly the expected
/// names with matching shapes.
pub(crate) fn restore_tensors(ckpt: &Checkpoint, targets: Vec<(String, &mut Tensor)>) -> Result<()> {
    for (name, _) in ckpt.tensors() {
        if !targets.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("unknown tensor name {name:?}")));
        }
    }
    for (name, slot) in targets {
        let t = ckpt
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

impl Generator {
    pub fn to_checkpoint(&self, manifest: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::new(manifest);
        for (name, t) in self.named_tensors() {
            ckpt.push(name, t.clone());
        }
        ckpt
    }

    /// Rebuilds a generator of the given shape from checkpoint tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint, role: Role, dims: ModelDims, output_activation: Activation) -> Result<Self> {
        let mut scratch = rng::stream(0, "restore", 0);
        let mut g = Generator::new(role, dims, output_activation, &mut scratch)?;
        let names: Vec<String> = g.named_tensors().into_iter().map(|(n, _)| n).collect();
        restore_tensors(ckpt, names.into_iter().zip(g.tensors_mut()).collect())?;
        Ok(g)
    }
}

impl Teacher {
    pub fn to_checkpoint(&self, manifest: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::new(manifest);
        for (name, t) in self.named_tensors() {
            ckpt.push(name, t.clone());
        }
        ckpt
    }

    /// `discriminator` gives the expected discriminator name and input
    /// width, if the teacher has one.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        dims: ModelDims,
        output_activation: Activation,
        discriminator: Option<(&str, usize)>,
    ) -> Result<Self> {
        let mut scratch = rng::stream(0, "restore", 0);
        let mut teacher = Teacher {
            generator: Generator::new(Role::Teacher, dims, output_activation, &mut scratch)?,
            discriminator: discriminator
                .map(|(name, width)| Discriminator::new(name, width, &mut scratch))
                .transpose()?,
        };
        let names: Vec<String> = teacher.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut slots = teacher.generator.tensors_mut();
        if let Some(d) = teacher.discriminator.as_mut() {
            slots.extend(d.tensors_mut());
        }
        restore_tensors(ckpt, names.into_iter().zip(slots).collect())?;
        Ok(teacher)
    }
}
