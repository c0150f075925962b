//! Two-phase training: an adversarially aligned teacher encoder-decoder,
//! then a student distilled from the frozen teacher.
//!
//! Both phases are full-batch over the population graph (identity
//! adjacency). Each teacher iteration takes one discriminator Adam step and
//! then one generator Adam step, in that order.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectome::nodes_for_edges;
use crate::diffmath::{Adam, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, HyperParams};
use crate::networks::{
    build_student, build_teacher, Adjacency, BoundGenerator, Checkpoint, Discriminator, Generator,
    Mode, ModelDims, Role, Teacher,
};
use crate::rng;

/// Training configuration being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Adversarial embedding alignment, full topology loss, decoder reuse.
    Full,
    /// Teacher on edge MAE only; student without decoder reuse.
    Baseline,
    /// Baseline plus a discriminator on predicted vs real HR features.
    BaselineDiscriminator,
    /// Full without the node-strength term.
    NoLocalTopology,
    /// Full without the teacher-decoder term in the student objective.
    NoTdRegularization,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Baseline,
        Variant::BaselineDiscriminator,
        Variant::NoLocalTopology,
        Variant::NoTdRegularization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::BaselineDiscriminator => "baseline-discriminator",
            Variant::NoLocalTopology => "no-local-topology",
            Variant::NoTdRegularization => "no-td-regularization",
        }
    }

    fn discriminator(self) -> Option<DiscriminatorKind> {
        match self {
            Variant::Baseline => None,
            Variant::BaselineDiscriminator => Some(DiscriminatorKind::Features),
            _ => Some(DiscriminatorKind::Embedding),
        }
    }

    fn uses_local_topology(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTdRegularization)
    }

    fn uses_decoder_reuse(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLocalTopology)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Validation(format!("unknown variant {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DiscriminatorKind {
    /// `D_align`: real projected HR rows vs encoder embeddings.
    Embedding,
    /// `D_hr`: real HR rows vs decoder predictions.
    Features,
}

impl DiscriminatorKind {
    fn name(self) -> &'static str {
        match self {
            DiscriminatorKind::Embedding => "D_align",
            DiscriminatorKind::Features => "D_hr",
        }
    }
}

/// One row of a training log. Columns that do not apply are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_topo_local: f64,
    pub loss_topo_global: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "iter,loss_d,loss_g,loss_topo_local,loss_topo_global";

impl TrainLog {
    /// CSV text; `preamble`, when given, becomes a leading `# ` comment line.
    pub fn to_csv(&self, preamble: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(p) = preamble {
            out.push_str("# ");
            out.push_str(p);
            out.push('\n');
        }
        out.push_str(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter,
                fmt_value(r.loss_d),
                fmt_value(r.loss_g),
                fmt_value(r.loss_topo_local),
                fmt_value(r.loss_topo_global)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, preamble: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(preamble).as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn generator_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_g).collect()
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// Metadata stored alongside model weights in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub role: Role,
    pub variant: Variant,
    pub dims: ModelDims,
    pub n_h: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Name and input width of the teacher's discriminator, if any.
    pub discriminator: Option<(String, usize)>,
    pub hyperparams: HyperParams,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherArtifact {
    pub teacher: Teacher,
    pub manifest: ModelManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentArtifact {
    pub student: Generator,
    pub manifest: ModelManifest,
}

impl TeacherArtifact {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(self.teacher.to_checkpoint(serde_json::to_value(&self.manifest)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let manifest = manifest_of(ckpt, Role::Teacher)?;
        let disc = manifest.discriminator.as_ref().map(|(n, w)| (n.as_str(), *w));
        let teacher = Teacher::from_checkpoint(
            ckpt,
            manifest.dims,
            manifest.hyperparams.decoder_output_activation,
            disc,
        )?;
        Ok(TeacherArtifact { teacher, manifest })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl StudentArtifact {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(self.student.to_checkpoint(serde_json::to_value(&self.manifest)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let manifest = manifest_of(ckpt, Role::Student)?;
        let student = Generator::from_checkpoint(
            ckpt,
            Role::Student,
            manifest.dims,
            manifest.hyperparams.decoder_output_activation,
        )?;
        Ok(StudentArtifact { student, manifest })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn manifest_of(ckpt: &Checkpoint, role: Role) -> Result<ModelManifest> {
    let manifest: ModelManifest = serde_json::from_value(ckpt.manifest().clone())
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.role != role {
        return Err(Error::Format(format!(
            "expected a {role:?} checkpoint, found {:?}",
            manifest.role
        )));
    }
    Ok(manifest)
}

/// Fixed `n_f′ × n_z` projection with entries uniform in `±1/√n_f′`.
pub fn alignment_projection(n_features: usize, n_z: usize, seed: u64) -> Tensor {
    let bound = 1.0 / (n_features as f64).sqrt();
    let mut r = rng::stream(seed, "alignment-projection", 0);
    Tensor::from_fn(n_features, n_z, |_, _| r.random_range(-bound..bound))
}

/// Real samples for the embedding discriminator: HR feature rows projected
/// to the embedding width by [`alignment_projection`].
pub fn real_alignment_samples(f_h: &Tensor, n_z: usize, seed: u64) -> Result<Tensor> {
    if f_h.cols() < n_z {
        return Err(Error::Contract(format!(
            "HR feature width {} is smaller than the embedding width {n_z}",
            f_h.cols()
        )));
    }
    f_h.matmul(&alignment_projection(f_h.cols(), n_z, seed))
}

fn hr_nodes(width: usize) -> Result<usize> {
    nodes_for_edges(width).ok_or_else(|| {
        Error::Contract(format!("HR feature width {width} is not r(r-1)/2 for any r"))
    })
}

fn check_finite(value: f64, phase: &'static str, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { phase, iteration })
    }
}

/// Adam update of the parameters bound to `nodes`, skipping none: a node
/// that received no gradient gets a zero update.
fn apply_adam(adam: &mut Adam, params: Vec<&mut Tensor>, nodes: &[NodeId], g: &Graph, root: NodeId) -> Result<()> {
    let mut grads = g.backward(root)?;
    let owned: Vec<Tensor> = nodes
        .iter()
        .map(|&id| {
            grads.take(id).unwrap_or_else(|| {
                let (r, c) = g.value(id).shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();
    let grad_refs: Vec<&Tensor> = owned.iter().collect();
    let mut params = params;
    adam.step(&mut params, &grad_refs)
}

/// Nodes of the teacher generator objective.
pub struct TeacherObjective {
    pub loss: NodeId,
    pub adversarial: Option<NodeId>,
    pub topology: losses::TopologyTerms,
    pub generator: BoundGenerator,
}

/// Records the teacher generator objective for `variant` on `g`, with
/// trainable generator weights and frozen discriminator weights.
pub fn teacher_objective(
    g: &mut Graph,
    teacher: &Teacher,
    f_l: &Tensor,
    f_h: &Tensor,
    hp: &HyperParams,
    variant: Variant,
    mode: &mut Mode<'_>,
) -> Result<TeacherObjective> {
    let n_h = hr_nodes(f_h.cols())?;
    let adj = Adjacency::Identity;
    let bound = teacher.generator.bind(g, true);
    let x = g.constant(f_l.clone());
    let z = teacher.generator.encode(g, &bound, x, &adj, mode)?;
    let pred = teacher.generator.decode(g, &bound, z, &adj, mode)?;
    let target = g.constant(f_h.clone());
    let topology = losses::topology_loss(g, target, pred, n_h, hp.sigma)?;

    let adversarial = match (variant.discriminator(), &teacher.discriminator) {
        (None, _) => None,
        (Some(kind), Some(disc)) => {
            let d = disc.bind(g, false);
            let fake = match kind {
                DiscriminatorKind::Embedding => z,
                DiscriminatorKind::Features => pred,
            };
            let scores = disc.forward(g, &d, fake)?;
            Some(losses::adversarial_generator_loss(g, scores)?)
        }
        (Some(kind), None) => {
            return Err(Error::Contract(format!(
                "variant {variant} needs a {} discriminator",
                kind.name()
            )))
        }
    };

    let loss = match variant {
        Variant::Baseline => topology.global,
        _ if variant.uses_local_topology() => {
            losses::teacher_loss(g, adversarial, topology.total, hp.lambda)?
        }
        _ => losses::teacher_loss(g, adversarial, topology.global, hp.lambda)?,
    };
    Ok(TeacherObjective {
        loss,
        adversarial,
        topology,
        generator: bound,
    })
}

/// One discriminator update; returns its loss before the step.
fn discriminator_step(
    teacher: &mut Teacher,
    adam: &mut Adam,
    kind: DiscriminatorKind,
    f_l: &Tensor,
    real: &Tensor,
    mode: &mut Mode<'_>,
) -> Result<f64> {
    let mut g = Graph::new();
    let adj = Adjacency::Identity;
    let gen = &teacher.generator;
    let bound = gen.bind(&mut g, false);
    let x = g.constant(f_l.clone());
    let mut fake = gen.encode(&mut g, &bound, x, &adj, mode)?;
    if kind == DiscriminatorKind::Features {
        fake = gen.decode(&mut g, &bound, fake, &adj, mode)?;
    }
    let disc = teacher
        .discriminator
        .as_mut()
        .expect("discriminator step without a discriminator");
    let d = disc.bind(&mut g, true);
    let real = g.constant(real.clone());
    let real_scores = disc.forward(&mut g, &d, real)?;
    let fake_scores = disc.forward(&mut g, &d, fake)?;
    let loss = losses::discriminator_loss(&mut g, real_scores, fake_scores)?;
    let value = g.value(loss).item()?;
    let nodes: Vec<NodeId> = d.weights().collect();
    apply_adam(adam, disc.tensors_mut(), &nodes, &g, loss)?;
    Ok(value)
}

/// Initial teacher for `variant`, before any training.
pub fn initial_teacher(dims: ModelDims, hp: &HyperParams, variant: Variant, seed: u64) -> Result<Teacher> {
    let mut teacher = build_teacher(dims, hp.decoder_output_activation, seed)?;
    teacher.discriminator = match variant.discriminator() {
        None => None,
        Some(DiscriminatorKind::Embedding) => teacher.discriminator,
        Some(DiscriminatorKind::Features) => Some(Discriminator::new(
            DiscriminatorKind::Features.name(),
            dims.output,
            &mut rng::stream(seed, "discriminator-init", 0),
        )?),
    };
    Ok(teacher)
}

pub fn train_teacher(
    f_l: &Tensor,
    f_h: &Tensor,
    hp: &HyperParams,
    variant: Variant,
    seed: u64,
) -> Result<(TeacherArtifact, TrainLog)> {
    hp.validate()?;
    if f_l.rows() != f_h.rows() || f_l.rows() == 0 {
        return Err(Error::Contract(format!(
            "LR and HR feature matrices need the same positive number of subjects, got {} and {}",
            f_l.rows(),
            f_h.rows()
        )));
    }
    let n_h = hr_nodes(f_h.cols())?;
    let dims = ModelDims {
        input: f_l.cols(),
        hidden: hp.hidden,
        latent: hp.n_z,
        output: f_h.cols(),
    };
    let mut teacher = initial_teacher(dims, hp, variant, seed)?;
    let kind = variant.discriminator();
    let real = match kind {
        Some(DiscriminatorKind::Embedding) => Some(real_alignment_samples(f_h, hp.n_z, seed)?),
        Some(DiscriminatorKind::Features) => Some(f_h.clone()),
        None => None,
    };

    let mut gen_adam = Adam::new(hp.adam(), teacher.generator.named_tensors().into_iter().map(|(_, t)| t));
    let mut disc_adam = teacher
        .discriminator
        .as_ref()
        .map(|d| Adam::new(hp.adam(), d.named_tensors().into_iter().map(|(_, t)| t)));
    let mut dropout_rng = rng::stream(seed, "teacher-dropout", 0);
    let mut log = TrainLog::default();

    for iter in 0..hp.iterations {
        let mut mode = Mode::Train {
            dropout: hp.dropout,
            rng: &mut dropout_rng,
        };
        let loss_d = match (kind, real.as_ref(), disc_adam.as_mut()) {
            (Some(kind), Some(real), Some(adam)) => {
                let v = discriminator_step(&mut teacher, adam, kind, f_l, real, &mut mode)?;
                check_finite(v, "discriminator", iter)?
            }
            _ => f64::NAN,
        };

        let mut g = Graph::new();
        let obj = teacher_objective(&mut g, &teacher, f_l, f_h, hp, variant, &mut mode)?;
        let loss_g = check_finite(g.value(obj.loss).item()?, "teacher", iter)?;
        let local = g.value(obj.topology.local).item()?;
        let global = g.value(obj.topology.global).item()?;
        let nodes: Vec<NodeId> = obj.generator.weights().collect();
        apply_adam(&mut gen_adam, teacher.generator.tensors_mut(), &nodes, &g, obj.loss)?;

        log.records.push(TrainRecord {
            iter,
            loss_d,
            loss_g,
            loss_topo_local: local,
            loss_topo_global: global,
        });
    }

    let manifest = ModelManifest {
        role: Role::Teacher,
        variant,
        dims,
        n_h,
        seed,
        iterations: hp.iterations,
        discriminator: teacher
            .discriminator
            .as_ref()
            .map(|d| (d.name.clone(), d.input_width())),
        hyperparams: hp.clone(),
        run_config: serde_json::Value::Null,
    };
    Ok((TeacherArtifact { teacher, manifest }, log))
}

/// How the student's weights start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StudentInit {
    /// Fresh Glorot weights from the run seed.
    #[default]
    Fresh,
    /// Copy of the teacher's encoder-decoder weights.
    CopyTeacher,
}

/// Frozen-teacher outputs the student imitates.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub embedding: Tensor,
    pub prediction: Tensor,
}

impl TeacherTargets {
    pub fn compute(teacher: &Teacher, f_l: &Tensor) -> Result<Self> {
        let (embedding, prediction) = teacher.generator.infer(f_l, &Adjacency::Identity)?;
        Ok(TeacherTargets {
            embedding,
            prediction,
        })
    }
}

/// Nodes of the student objective.
pub struct StudentObjective {
    pub loss: NodeId,
    pub embedding: NodeId,
    pub global: NodeId,
    pub decoder_reuse: Option<NodeId>,
    pub student: BoundGenerator,
    /// Teacher decoder weights used by the decoder-reuse term; constants.
    pub teacher: Option<BoundGenerator>,
    pub student_embedding: NodeId,
}

/// Records the student objective on `g`: trainable student weights, teacher
/// weights and teacher outputs as constants. The teacher decoder runs in
/// evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn student_objective(
    g: &mut Graph,
    student: &Generator,
    teacher: &Teacher,
    targets: &TeacherTargets,
    f_l: &Tensor,
    hp: &HyperParams,
    variant: Variant,
    mode: &mut Mode<'_>,
) -> Result<StudentObjective> {
    let adj = Adjacency::Identity;
    let bound = student.bind(g, true);
    let x = g.constant(f_l.clone());
    let z_s = student.encode(g, &bound, x, &adj, mode)?;
    let pred_s = student.decode(g, &bound, z_s, &adj, mode)?;
    let z_t = g.constant(targets.embedding.clone());
    let pred_t = g.constant(targets.prediction.clone());
    let terms = losses::student_terms(g, z_t, z_s, pred_s, pred_t)?;

    let (decoder_reuse, teacher_bound) = if variant.uses_decoder_reuse() {
        let tb = teacher.generator.bind(g, false);
        let pred_tp = teacher.generator.decode(g, &tb, z_s, &adj, &mut Mode::Eval)?;
        (Some(losses::mae(g, pred_s, pred_tp)?), Some(tb))
    } else {
        (None, None)
    };
    let loss = losses::student_loss(
        g,
        decoder_reuse,
        terms.global,
        terms.embedding,
        (hp.lambda1, hp.lambda2, hp.lambda3),
    )?;
    Ok(StudentObjective {
        loss,
        embedding: terms.embedding,
        global: terms.global,
        decoder_reuse,
        student: bound,
        teacher: teacher_bound,
        student_embedding: z_s,
    })
}

pub fn train_student(
    f_l: &Tensor,
    teacher: &TeacherArtifact,
    hp: &HyperParams,
    variant: Variant,
    seed: u64,
    init: StudentInit,
) -> Result<(StudentArtifact, TrainLog)> {
    hp.validate()?;
    let dims = teacher.teacher.generator.dims();
    if f_l.cols() != dims.input {
        return Err(Error::Contract(format!(
            "LR feature width {} does not match the teacher's input width {}",
            f_l.cols(),
            dims.input
        )));
    }
    if hp.n_z != dims.latent || hp.hidden != dims.hidden {
        return Err(Error::Contract(format!(
            "hyperparameters ask for hidden={} n_z={}, teacher has hidden={} n_z={}",
            hp.hidden, hp.n_z, dims.hidden, dims.latent
        )));
    }
    let frozen = &teacher.teacher;
    let targets = TeacherTargets::compute(frozen, f_l)?;
    let mut student = match init {
        StudentInit::Fresh => build_student(dims, hp.decoder_output_activation, seed)?,
        StudentInit::CopyTeacher => frozen.generator.with_role(Role::Student),
    };
    let mut adam = Adam::new(hp.adam(), student.named_tensors().into_iter().map(|(_, t)| t));
    let mut dropout_rng = rng::stream(seed, "student-dropout", 0);
    let mut log = TrainLog::default();

    for iter in 0..hp.iterations {
        let mut mode = Mode::Train {
            dropout: hp.dropout,
            rng: &mut dropout_rng,
        };
        let mut g = Graph::new();
        let obj = student_objective(&mut g, &student, frozen, &targets, f_l, hp, variant, &mut mode)?;
        let loss = check_finite(g.value(obj.loss).item()?, "student", iter)?;
        let global = g.value(obj.global).item()?;
        let nodes: Vec<NodeId> = obj.student.weights().collect();
        apply_adam(&mut adam, student.tensors_mut(), &nodes, &g, obj.loss)?;
        log.records.push(TrainRecord {
            iter,
            loss_d: f64::NAN,
            loss_g: loss,
            loss_topo_local: f64::NAN,
            loss_topo_global: global,
        });
    }

    let manifest = ModelManifest {
        role: Role::Student,
        variant,
        dims,
        n_h: teacher.manifest.n_h,
        seed,
        iterations: hp.iterations,
        discriminator: None,
        hyperparams: hp.clone(),
        run_config: serde_json::Value::Null,
    };
    Ok((StudentArtifact { student, manifest }, log))
}

/// Evaluation-mode HR prediction.
pub fn predict(student: &StudentArtifact, f_l: &Tensor) -> Result<Tensor> {
    let dims = student.manifest.dims;
    if f_l.cols() != dims.input {
        return Err(Error::Contract(format!(
            "LR feature width {} does not match the student's input width {}",
            f_l.cols(),
            dims.input
        )));
    }
    Ok(student.student.infer(f_l, &Adjacency::Identity)?.1)
}
