#![allow(dead_code)]

use l2skd_core::connectome::{antivectorize, eigenvector_centrality, pagerank, vectorize, ConnectivityMatrix};
use l2skd_core::dataio::{generate_synthetic, Dataset, SyntheticConfig};
use l2skd_core::diffmath::{Graph, NodeId, Tensor};
use l2skd_core::losses::{self, HyperParams};
use l2skd_core::networks::{build_student, Discriminator, Generator, Mode, ModelDims, Teacher};
use l2skd_core::pipeline::{
    initial_teacher, real_alignment_samples, student_objective, teacher_objective, TeacherTargets, Variant,
};
use l2skd_core::rng::{self, RunRng};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// gradients, over every entry of every checked tensor.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub entries: usize,
    pub nonzero: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel < FD_TOLERANCE && self.nonzero > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `build` records a scalar loss on a fresh graph and returns it with the
/// nodes bound to `tensors(model)`, in the same order.
pub fn check_model<M: Clone>(
    model: &M,
    tensors: impl Fn(&mut M) -> Vec<&mut Tensor>,
    build: impl Fn(&M, &mut Graph) -> (NodeId, Vec<NodeId>),
) -> FdReport {
    let mut g = Graph::new();
    let (loss, nodes) = build(model, &mut g);
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = nodes
        .iter()
        .map(|&n| {
            grads.get(n).cloned().unwrap_or_else(|| {
                let (r, c) = g.value(n).shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();

    let eval = |m: &M| {
        let mut g = Graph::new();
        let (loss, _) = build(m, &mut g);
        g.value(loss).item().unwrap()
    };
    let mut report = FdReport::default();
    let mut probe = model.clone();
    let count = tensors(&mut probe).len();
    assert_eq!(count, analytic.len(), "tensor list and bound nodes differ");
    for t in 0..count {
        for e in 0..analytic[t].len() {
            let mut plus = model.clone();
            tensors(&mut plus)[t].data_mut()[e] += FD_STEP;
            let mut minus = model.clone();
            tensors(&mut minus)[t].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[t].data()[e];
            report.max_rel = report.max_rel.max(rel_err(a, numeric));
            report.entries += 1;
            if a != 0.0 {
                report.nonzero += 1;
            }
        }
    }
    report
}

/// Finite-difference check of a function of free tensors.
pub fn check_fn(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> FdReport {
    check_model(
        &inputs,
        |m| m.iter_mut().collect(),
        |m, g| {
            let ids: Vec<NodeId> = m.iter().map(|t| g.param(t.clone())).collect();
            (build(g, &ids), ids)
        },
    )
}

pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RunRng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Reduces a node to a scalar through a fixed random weighting, so every
/// output entry gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, node: NodeId, seed: u64) -> NodeId {
    let (r, c) = g.value(node).shape();
    let mut rng = rng::stream(seed, "weighting", 0);
    let w = g.constant(random_tensor(r, c, -1.0, 1.0, &mut rng));
    let prod = g.mul(node, w).unwrap();
    g.sum(prod).unwrap()
}

// Toy problem: 6 subjects, 5 -> 8 nodes, n_z = 4.
pub const TOY_SUBJECTS: usize = 6;
pub const TOY_LR: usize = 5;
pub const TOY_HR: usize = 8;
pub const TOY_LATENT: usize = 4;
pub const TOY_HIDDEN: usize = 7;

pub fn toy_hyperparams() -> HyperParams {
    HyperParams {
        n_z: TOY_LATENT,
        hidden: TOY_HIDDEN,
        ..HyperParams::default()
    }
}

pub fn toy_data(seed: u64) -> Dataset {
    generate_synthetic(
        SyntheticConfig {
            n_subjects: TOY_SUBJECTS,
            n_l: TOY_LR,
            n_h: TOY_HR,
        },
        seed,
    )
    .unwrap()
}

pub fn toy_dims() -> ModelDims {
    ModelDims {
        input: TOY_LR * (TOY_LR - 1) / 2,
        hidden: TOY_HIDDEN,
        latent: TOY_LATENT,
        output: TOY_HR * (TOY_HR - 1) / 2,
    }
}

/// Training-mode forward with a dropout mask that is identical on every
/// call, so the loss stays a deterministic function of the weights.
pub fn fixed_dropout<T>(f: impl FnOnce(&mut Mode<'_>) -> T) -> T {
    let mut rng = rng::stream(99, "fd-dropout", 0);
    let mut mode = Mode::Train {
        dropout: 0.1,
        rng: &mut rng,
    };
    f(&mut mode)
}

fn generator_tensors(t: &mut Teacher) -> Vec<&mut Tensor> {
    t.generator.tensors_mut()
}

fn discriminator_tensors(t: &mut Teacher) -> Vec<&mut Tensor> {
    t.discriminator.as_mut().unwrap().tensors_mut()
}

/// Zero biases put ReLU inputs exactly on the kink whenever a sample row is
/// all zeros; move them to a generic point before differencing.
fn jitter_discriminator_biases(t: &mut Teacher, seed: u64) {
    let mut rng = rng::stream(seed, "fd-bias", 0);
    if let Some(d) = t.discriminator.as_mut() {
        for b in d.tensors_mut().into_iter().filter(|b| b.rows() == 1) {
            for v in b.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

/// Which scalar of the teacher objective to differentiate.
#[derive(Clone, Copy, Debug)]
pub enum TeacherTerm {
    Total,
    Adversarial,
    Topology,
}

pub fn check_teacher(variant: Variant, term: TeacherTerm, seed: u64) -> FdReport {
    let data = toy_data(seed);
    let hp = toy_hyperparams();
    let teacher = initial_teacher(toy_dims(), &hp, variant, seed).unwrap();
    check_model(&teacher, generator_tensors, |t, g| {
        fixed_dropout(|mode| {
            let obj = teacher_objective(g, t, &data.lr, &data.hr, &hp, variant, mode).unwrap();
            let root = match term {
                TeacherTerm::Total => obj.loss,
                TeacherTerm::Adversarial => obj.adversarial.expect("variant without adversarial term"),
                TeacherTerm::Topology => obj.topology.total,
            };
            (root, obj.generator.weights().collect())
        })
    })
}

/// Discriminator loss on real alignment samples vs generator embeddings
/// (or predictions for the HR-feature discriminator), differentiated with
/// respect to the discriminator.
pub fn check_discriminator(variant: Variant, seed: u64) -> FdReport {
    let data = toy_data(seed);
    let hp = toy_hyperparams();
    let mut teacher = initial_teacher(toy_dims(), &hp, variant, seed).unwrap();
    jitter_discriminator_biases(&mut teacher, seed);
    let on_features = variant == Variant::BaselineDiscriminator;
    let real = if on_features {
        data.hr.clone()
    } else {
        real_alignment_samples(&data.hr, hp.n_z, seed).unwrap()
    };
    let (z, pred) = teacher
        .generator
        .infer(&data.lr, &l2skd_core::networks::Adjacency::Identity)
        .unwrap();
    let fake = if on_features { pred } else { z };
    check_model(&teacher, discriminator_tensors, |t, g| {
        let d: &Discriminator = t.discriminator.as_ref().unwrap();
        let bound = d.bind(g, true);
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let rs = d.forward(g, &bound, r).unwrap();
        let fs = d.forward(g, &bound, f).unwrap();
        (losses::discriminator_loss(g, rs, fs).unwrap(), bound.weights().collect())
    })
}

#[derive(Clone, Copy, Debug)]
pub enum StudentTerm {
    Total,
    Embedding,
    Global,
    DecoderReuse,
}

/// Student objective against a toy teacher, differentiated with respect to
/// the student's weights.
pub fn check_student(variant: Variant, term: StudentTerm, seed: u64) -> FdReport {
    let data = toy_data(seed);
    let hp = toy_hyperparams();
    let teacher = initial_teacher(toy_dims(), &hp, variant, seed).unwrap();
    let targets = TeacherTargets::compute(&teacher, &data.lr).unwrap();
    let student = build_student(toy_dims(), hp.decoder_output_activation, seed + 1).unwrap();
    check_model(&student, Generator::tensors_mut, |s, g| {
        fixed_dropout(|mode| {
            let obj = student_objective(g, s, &teacher, &targets, &data.lr, &hp, variant, mode).unwrap();
            let root = match term {
                StudentTerm::Total => obj.loss,
                StudentTerm::Embedding => obj.embedding,
                StudentTerm::Global => obj.global,
                StudentTerm::DecoderReuse => obj.decoder_reuse.expect("variant without decoder reuse"),
            };
            (root, obj.student.weights().collect())
        })
    })
}

/// Every differentiable op on random inputs no larger than 8x8.
pub fn op_gradient_checks(seed: u64) -> Vec<(&'static str, FdReport)> {
    let mut rng = rng::stream(seed, "op-checks", 0);
    let mut out = Vec::new();
    let mut t = |r, c, lo, hi| random_tensor(r, c, lo, hi, &mut rng);

    out.push(("matmul", check_fn(vec![t(5, 7, -1.0, 1.0), t(7, 3, -1.0, 1.0)], |g, x| {
        let y = g.matmul(x[0], x[1]).unwrap();
        weighted_sum(g, y, 1)
    })));
    out.push(("add", check_fn(vec![t(4, 6, -1.0, 1.0), t(4, 6, -1.0, 1.0)], |g, x| {
        let y = g.add(x[0], x[1]).unwrap();
        weighted_sum(g, y, 2)
    })));
    out.push(("add_row", check_fn(vec![t(4, 6, -1.0, 1.0), t(1, 6, -1.0, 1.0)], |g, x| {
        let y = g.add_row(x[0], x[1]).unwrap();
        weighted_sum(g, y, 3)
    })));
    out.push(("sub", check_fn(vec![t(3, 8, -1.0, 1.0), t(3, 8, -1.0, 1.0)], |g, x| {
        let y = g.sub(x[0], x[1]).unwrap();
        weighted_sum(g, y, 4)
    })));
    out.push(("mul", check_fn(vec![t(6, 5, -1.0, 1.0), t(6, 5, -1.0, 1.0)], |g, x| {
        let y = g.mul(x[0], x[1]).unwrap();
        weighted_sum(g, y, 5)
    })));
    // Entries kept away from the kink so the stencil never straddles it.
    let signed = |r: usize, c: usize, rng: &mut RunRng| {
        Tensor::from_fn(r, c, |_, _| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
    };
    let mut rng2 = rng::stream(seed, "op-checks-signed", 0);
    out.push(("relu", check_fn(vec![signed(7, 7, &mut rng2)], |g, x| {
        let y = g.relu(x[0]).unwrap();
        weighted_sum(g, y, 6)
    })));
    out.push(("abs", check_fn(vec![signed(8, 4, &mut rng2)], |g, x| {
        let y = g.abs(x[0]).unwrap();
        weighted_sum(g, y, 7)
    })));
    let mut rng3 = rng::stream(seed, "op-checks-rest", 0);
    let mut t = |r, c, lo, hi| random_tensor(r, c, lo, hi, &mut rng3);
    out.push(("sigmoid", check_fn(vec![t(5, 5, -3.0, 3.0)], |g, x| {
        let y = g.sigmoid(x[0]).unwrap();
        weighted_sum(g, y, 8)
    })));
    out.push(("dropout", check_fn(vec![t(8, 8, -1.0, 1.0)], |g, x| {
        let mut r = rng::stream(5, "mask", 0);
        let y = g.dropout(x[0], 0.3, &mut r).unwrap();
        weighted_sum(g, y, 9)
    })));
    out.push(("mean", check_fn(vec![t(3, 7, -1.0, 1.0)], |g, x| {
        let y = g.mean(x[0]).unwrap();
        let y2 = g.mul(y, y).unwrap();
        g.sum(y2).unwrap()
    })));
    out.push(("sum", check_fn(vec![t(6, 2, -1.0, 1.0)], |g, x| {
        let y = g.sum(x[0]).unwrap();
        let y2 = g.mul(y, y).unwrap();
        g.sum(y2).unwrap()
    })));
    out.push(("log", check_fn(vec![t(4, 4, 0.05, 0.95)], |g, x| {
        let y = g.clamped_log(x[0]).unwrap();
        weighted_sum(g, y, 10)
    })));
    out.push(("scale", check_fn(vec![t(2, 8, -1.0, 1.0)], |g, x| {
        let y = g.scale(x[0], -2.5).unwrap();
        weighted_sum(g, y, 11)
    })));
    out.push(("one_minus", check_fn(vec![t(3, 3, -1.0, 1.0)], |g, x| {
        let y = g.one_minus(x[0]).unwrap();
        weighted_sum(g, y, 12)
    })));
    out.push(("edge_strength", check_fn(vec![t(3, 15, -1.0, 1.0)], |g, x| {
        let y = g.edge_strength(x[0], 6).unwrap();
        weighted_sum(g, y, 13)
    })));
    out.push(("row_normalize", check_fn(vec![t(4, 6, 0.1, 1.0)], |g, x| {
        let y = g.row_normalize(x[0]).unwrap();
        weighted_sum(g, y, 14)
    })));
    out.push(("row_normalize_signed", check_fn(vec![signed(4, 6, &mut rng2)], |g, x| {
        let y = g.row_normalize(x[0]).unwrap();
        weighted_sum(g, y, 15)
    })));
    out.push(("composite", check_fn(vec![t(6, 5, -1.0, 1.0), t(5, 4, -1.0, 1.0), t(4, 3, -1.0, 1.0)], |g, x| {
        let h = g.matmul(x[0], x[1]).unwrap();
        let h = g.sigmoid(h).unwrap();
        let h = g.matmul(h, x[2]).unwrap();
        let h = g.sigmoid(h).unwrap();
        let l = g.clamped_log(h).unwrap();
        g.mean(l).unwrap()
    })));
    out
}

/// Every loss term on the toy problem, named after what it checks.
pub fn loss_gradient_checks(seed: u64) -> Vec<(String, FdReport)> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        out.push((format!("teacher total [{v}]"), check_teacher(v, TeacherTerm::Total, seed)));
        out.push((format!("student total [{v}]"), check_student(v, StudentTerm::Total, seed)));
    }
    out.push(("topology".into(), check_teacher(Variant::Full, TeacherTerm::Topology, seed)));
    out.push(("adversarial generator (D_align)".into(), check_teacher(Variant::Full, TeacherTerm::Adversarial, seed)));
    out.push((
        "adversarial generator (D_hr)".into(),
        check_teacher(Variant::BaselineDiscriminator, TeacherTerm::Adversarial, seed),
    ));
    out.push(("discriminator (D_align)".into(), check_discriminator(Variant::Full, seed)));
    out.push(("discriminator (D_hr)".into(), check_discriminator(Variant::BaselineDiscriminator, seed)));
    out.push(("student embedding".into(), check_student(Variant::Full, StudentTerm::Embedding, seed)));
    out.push(("student global".into(), check_student(Variant::Full, StudentTerm::Global, seed)));
    out.push(("student decoder reuse".into(), check_student(Variant::Full, StudentTerm::DecoderReuse, seed)));
    out
}

/// Random symmetric zero-diagonal matrix with weights in `[lo, 1)`; each
/// edge is zero with probability `sparsity`.
pub fn random_graph(nodes: usize, lo: f64, sparsity: f64, rng: &mut RunRng) -> ConnectivityMatrix {
    let edges: Vec<f64> = (0..nodes * (nodes - 1) / 2)
        .map(|_| {
            if rng.random_bool(sparsity) {
                0.0
            } else {
                rng.random_range(lo..1.0)
            }
        })
        .collect();
    antivectorize(&edges, nodes).unwrap()
}

pub fn is_connected(m: &ConnectivityMatrix) -> bool {
    let r = m.nodes();
    let mut seen = vec![false; r];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..r {
            if !seen[j] && m.get(i, j) > 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn dense(m: &ConnectivityMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.nodes(), m.nodes(), m.weights().data())
}

/// Principal eigenvector from a dense symmetric eigensolver, sign fixed to
/// non-negative and scaled to unit length.
pub fn eigen_oracle(m: &ConnectivityMatrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(dense(m));
    let top = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(top);
    let sign = if v.sum() < 0.0 { -1.0 } else { 1.0 };
    let norm = v.norm();
    v.iter().map(|x| sign * x / norm).collect()
}

/// PageRank from the linear system `(I - d Pᵀ) π = (1 - d)/r · 1`, with
/// dangling rows replaced by the uniform distribution.
pub fn pagerank_oracle(m: &ConnectivityMatrix, damping: f64) -> Vec<f64> {
    let r = m.nodes();
    let mut p = dense(m);
    for i in 0..r {
        let s: f64 = p.row(i).sum();
        for j in 0..r {
            p[(i, j)] = if s > 0.0 { p[(i, j)] / s } else { 1.0 / r as f64 };
        }
    }
    let a = DMatrix::identity(r, r) - p.transpose() * damping;
    let b = DVector::from_element(r, (1.0 - damping) / r as f64);
    let x = a.lu().solve(&b).expect("singular PageRank system");
    let total = x.sum();
    x.iter().map(|v| v / total).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleReport {
    pub graphs: usize,
    pub eigen_max_err: f64,
    pub pagerank_max_err: f64,
    pub round_trips: usize,
    pub round_trip_failures: usize,
}

impl OracleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.eigen_max_err < tol && self.pagerank_max_err < tol && self.round_trip_failures == 0
    }
}

/// 200 connected random graphs with 2..=8 nodes against the dense oracles,
/// plus 1000 vectorize/antivectorize round trips.
pub fn connectome_oracles(seed: u64) -> OracleReport {
    let mut rng = rng::stream(seed, "oracle-graphs", 0);
    let mut report = OracleReport::default();
    while report.graphs < 200 {
        let nodes = rng.random_range(2..=8);
        let sparsity = if report.graphs % 4 == 3 { 0.3 } else { 0.0 };
        let m = random_graph(nodes, 0.01, sparsity, &mut rng);
        if !is_connected(&m) {
            continue;
        }
        report.graphs += 1;
        report.eigen_max_err = report
            .eigen_max_err
            .max(max_abs_diff(&eigenvector_centrality(&m), &eigen_oracle(&m)));
        report.pagerank_max_err = report
            .pagerank_max_err
            .max(max_abs_diff(&pagerank(&m, 0.85), &pagerank_oracle(&m, 0.85)));
    }
    for _ in 0..1000 {
        let nodes = rng.random_range(2..=12);
        let edges: Vec<f64> = (0..nodes * (nodes - 1) / 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = antivectorize(&edges, nodes).unwrap();
        let back = vectorize(&m);
        let again = antivectorize(&back, nodes).unwrap();
        report.round_trips += 1;
        if back != edges || again != m {
            report.round_trip_failures += 1;
        }
    }
    report
}
