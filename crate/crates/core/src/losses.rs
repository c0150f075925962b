//! Training objectives, recorded on a [`Graph`] so they can be
//! differentiated.

use serde::{Deserialize, Serialize};

use crate::connectome::edge_count;
use crate::diffmath::{AdamConfig, Graph, NodeId};
use crate::error::{Error, Result};
use crate::networks::Activation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Weight of the node-strength term inside the topology loss.
    pub sigma: f64,
    /// Weight of the topology loss in the teacher objective.
    pub lambda: f64,
    /// Teacher-decoder reconstruction term of the student objective.
    pub lambda1: f64,
    /// Prediction imitation term of the student objective.
    pub lambda2: f64,
    /// Embedding imitation term of the student objective.
    pub lambda3: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub hidden: usize,
    pub n_z: usize,
    pub dropout: f64,
    pub damping: f64,
    pub decoder_output_activation: Activation,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            sigma: 0.1,
            lambda: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 150,
            hidden: 100,
            n_z: 50,
            dropout: 0.1,
            damping: 0.85,
            decoder_output_activation: Activation::Identity,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("sigma", self.sigma),
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("Adam betas must be in [0, 1)".into()));
        }
        if self.hidden == 0 || self.n_z == 0 {
            return Err(Error::Validation("hidden and n_z must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::Validation(format!("damping must be in (0, 1), got {}", self.damping)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Mean absolute error over all entries.
pub fn mae(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `−mean log D(real) − mean log(1 − D(fake))`, minimized by the
/// discriminator.
pub fn discriminator_loss(g: &mut Graph, real_scores: NodeId, fake_scores: NodeId) -> Result<NodeId> {
    let log_real = g.clamped_log(real_scores)?;
    let real_term = g.mean(log_real)?;
    let fake_term = log_one_minus_mean(g, fake_scores)?;
    let total = g.add(real_term, fake_term)?;
    g.scale(total, -1.0)
}

/// `mean log(1 − D(fake))`, minimized by the generator.
pub fn adversarial_generator_loss(g: &mut Graph, fake_scores: NodeId) -> Result<NodeId> {
    log_one_minus_mean(g, fake_scores)
}

fn log_one_minus_mean(g: &mut Graph, scores: NodeId) -> Result<NodeId> {
    let q = g.one_minus(scores)?;
    let l = g.clamped_log(q)?;
    g.mean(l)
}

#[derive(Clone, Copy, Debug)]
pub struct TopologyTerms {
    /// Node-strength MAE, unweighted.
    pub local: NodeId,
    /// Edge-weight MAE.
    pub global: NodeId,
    /// `σ·local + global`.
    pub total: NodeId,
}

/// Normalized node strengths of every subject row of an edge-feature node.
pub fn strengths(g: &mut Graph, features: NodeId, nodes: usize) -> Result<NodeId> {
    let s = g.edge_strength(features, nodes)?;
    g.row_normalize(s)
}

/// `σ·mae(S, Ŝ) + mae(F, F̂)` where `S`, `Ŝ` are the normalized node
/// strengths of the antivectorized target and predicted graphs.
pub fn topology_loss(g: &mut Graph, target: NodeId, predicted: NodeId, nodes: usize, sigma: f64) -> Result<TopologyTerms> {
    let expected = edge_count(nodes);
    for id in [target, predicted] {
        let w = g.value(id).cols();
        if w != expected {
            return Err(Error::Contract(format!(
                "topology loss over {nodes} nodes needs {expected} edge columns, got {w}"
            )));
        }
    }
    let s_target = strengths(g, target, nodes)?;
    let s_pred = strengths(g, predicted, nodes)?;
    let local = mae(g, s_target, s_pred)?;
    let global = mae(g, target, predicted)?;
    let weighted = g.scale(local, sigma)?;
    let total = g.add(weighted, global)?;
    Ok(TopologyTerms { local, global, total })
}

/// `adv + λ·topo`; without an adversarial term this is `λ·topo`.
pub fn teacher_loss(g: &mut Graph, adversarial: Option<NodeId>, topology: NodeId, lambda: f64) -> Result<NodeId> {
    let topo = g.scale(topology, lambda)?;
    match adversarial {
        Some(adv) => g.add(adv, topo),
        None => Ok(topo),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StudentTerms {
    pub embedding: NodeId,
    pub global: NodeId,
}

/// `L_emb = mae(Zᵀ, Zˢ)` and `L_glb = mae(F̂ˢ, F̂ᵀ)`. Teacher outputs should
/// be constants on `g`.
pub fn student_terms(
    g: &mut Graph,
    teacher_embedding: NodeId,
    student_embedding: NodeId,
    student_prediction: NodeId,
    teacher_prediction: NodeId,
) -> Result<StudentTerms> {
    Ok(StudentTerms {
        embedding: mae(g, teacher_embedding, student_embedding)?,
        global: mae(g, student_prediction, teacher_prediction)?,
    })
}

/// `(λ₁·L_dec′ + λ₂·L_glb + λ₃·L_emb) / 3`; a missing `L_dec′` drops its
/// term but keeps the divisor.
pub fn student_loss(
    g: &mut Graph,
    decoder_reuse: Option<NodeId>,
    global: NodeId,
    embedding: NodeId,
    (lambda1, lambda2, lambda3): (f64, f64, f64),
) -> Result<NodeId> {
    let glb = g.scale(global, lambda2)?;
    let emb = g.scale(embedding, lambda3)?;
    let mut sum = g.add(glb, emb)?;
    if let Some(dec) = decoder_reuse {
        let dec = g.scale(dec, lambda1)?;
        sum = g.add(dec, sum)?;
    }
    g.scale(sum, 1.0 / 3.0)
}
