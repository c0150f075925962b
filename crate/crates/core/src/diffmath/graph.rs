//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only list of nodes in topological order. Each op
//! is evaluated eagerly when it is added; [`Graph::forward`] re-evaluates
//! every op from the current leaf values (used after [`Graph::set_leaf`]),
//! and [`Graph::backward`] accumulates `∂root/∂node` for every node that
//! depends on a trainable leaf.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to arguments of [`Graph::clamped_log`] in the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Below this magnitude a row sum is treated as zero by [`Graph::row_normalize`].
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `n×m` plus a `1×m` row added to every row.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Elementwise product with a fixed mask already scaled by `1/(1-p)`.
    Dropout { input: NodeId, mask: Tensor },
    Abs(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// `ln(clamp(x, lo, hi))`; zero gradient where the clamp is active.
    ClampedLog { input: NodeId, lo: f64, hi: f64 },
    /// `scale * x + shift`.
    Affine { input: NodeId, scale: f64, shift: f64 },
    /// Rows of strict-upper-triangle edge vectors to per-node strengths.
    EdgeStrength { input: NodeId, nodes: usize },
    /// Each row divided by its L1 norm; near-zero rows map to uniform.
    RowNormalize(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Relu(a) | Sigmoid(a) | Abs(a) | Mean(a) | Sum(a) | RowNormalize(a) => vec![*a],
            Dropout { input, .. }
            | ClampedLog { input, .. }
            | Affine { input, .. }
            | EdgeStrength { input, .. } => vec![*input],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not depend on any trainable leaf.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push_raw(Op::Leaf, value, trainable)
    }

    /// Replaces a leaf value. Call [`Graph::forward`] afterwards to refresh
    /// dependent nodes.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", id.0)));
        }
        node.value.check_same_shape("set_leaf", &value)?;
        node.value = value;
        Ok(())
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    /// Re-evaluates every op node, in insertion order, from current leaf
    /// values. Returns the value of `root`.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(self.value(root))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Add(a, b) => binary("add", v(a), v(b), |x, y| x + y)?,
            Op::Sub(a, b) => binary("sub", v(a), v(b), |x, y| x - y)?,
            Op::Mul(a, b) => binary("mul", v(a), v(b), |x, y| x * y)?,
            Op::AddRow(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(Error::shape("add_row", a.shape(), b.shape()));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (x, y) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                out
            }
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Dropout { input, mask } => binary("dropout", v(input), mask, |x, m| x * m)?,
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Mean(a) => {
                let a = v(a);
                if a.is_empty() {
                    return Err(Error::Contract("mean of an empty tensor".into()));
                }
                Tensor::scalar(a.mean())
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::ClampedLog { input, lo, hi } => v(input).map(|x| x.clamp(*lo, *hi).ln()),
            Op::Affine {
                input,
                scale,
                shift,
            } => v(input).map(|x| scale * x + shift),
            Op::EdgeStrength { input, nodes } => edge_strength(v(input), *nodes)?,
            Op::RowNormalize(a) => row_normalize(v(a)),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    /// Inverted dropout with a Bernoulli mask drawn from `rng`. A rate of
    /// zero returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (rows, cols) = self.value(a).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.push(Op::Dropout { input: a, mask })
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    /// `ln(clamp(x, LOG_CLAMP, 1 - LOG_CLAMP))`.
    pub fn clamped_log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ClampedLog {
            input: a,
            lo: LOG_CLAMP,
            hi: 1.0 - LOG_CLAMP,
        })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(a, factor, 0.0)
    }

    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine {
            input: a,
            scale,
            shift,
        })
    }

    pub fn edge_strength(&mut self, a: NodeId, nodes: usize) -> Result<NodeId> {
        self.push(Op::EdgeStrength { input: a, nodes })
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::RowNormalize(a))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a trainable leaf. Consumers of a shared node accumulate.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for each input of `node` that needs one.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.matmul_nt(v(*b))?));
                }
                if needs(*b) {
                    out.push((*b, v(*a).matmul_tn(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, b) => {
                if needs(*b) {
                    let mut col = Tensor::zeros(1, g.cols());
                    for r in g.row_iter() {
                        for (acc, x) in col.data_mut().iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    out.push((*b, col));
                }
                out.push((*a, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if needs(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.zip_map(v(*b), |x, y| x * y)?));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(v(*a), |x, y| x * y)?));
                }
            }
            Op::Relu(a) => {
                out.push((*a, g.zip_map(v(*a), |x, y| if y > 0.0 { x } else { 0.0 })?));
            }
            Op::Sigmoid(a) => {
                out.push((*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, g.zip_map(mask, |x, m| x * m)?));
            }
            Op::Abs(a) => {
                out.push((*a, g.zip_map(v(*a), |x, y| x * sign(y))?));
            }
            Op::Mean(a) => {
                let (r, c) = v(*a).shape();
                out.push((*a, Tensor::filled(r, c, g.data()[0] / (r * c) as f64)));
            }
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                out.push((*a, Tensor::filled(r, c, g.data()[0])));
            }
            Op::ClampedLog { input, lo, hi } => {
                let grad = g.zip_map(v(*input), |x, y| {
                    if y < *lo || y > *hi {
                        0.0
                    } else {
                        x / y
                    }
                })?;
                out.push((*input, grad));
            }
            Op::Affine { input, scale, .. } => {
                out.push((*input, g.map(|x| x * scale)));
            }
            Op::EdgeStrength { input, nodes } => {
                out.push((*input, edge_strength_backward(g, *nodes)));
            }
            Op::RowNormalize(a) => {
                out.push((*a, row_normalize_backward(g, v(*a))));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.check_same_shape(op, b)?;
    a.zip_map(b, f)
}

fn edge_strength(edges: &Tensor, nodes: usize) -> Result<Tensor> {
    let expected = nodes * nodes.saturating_sub(1) / 2;
    if edges.cols() != expected {
        return Err(Error::Contract(format!(
            "edge_strength over {nodes} nodes needs {expected} edge columns, got {}",
            edges.cols()
        )));
    }
    let mut out = Tensor::zeros(edges.rows(), nodes);
    for s in 0..edges.rows() {
        let row = edges.row(s);
        let strength = out.row_mut(s);
        let mut e = 0;
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                strength[i] += row[e];
                strength[j] += row[e];
                e += 1;
            }
        }
    }
    Ok(out)
}

fn edge_strength_backward(g: &Tensor, nodes: usize) -> Tensor {
    let n_edges = nodes * nodes.saturating_sub(1) / 2;
    let mut out = Tensor::zeros(g.rows(), n_edges);
    for s in 0..g.rows() {
        let gs = g.row(s);
        let row = out.row_mut(s);
        let mut e = 0;
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                row[e] = gs[i] + gs[j];
                e += 1;
            }
        }
    }
    out
}

fn l1_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x.abs()).sum()
}

fn row_normalize(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let cols = a.cols();
    for r in 0..a.rows() {
        let total = l1_norm(a.row(r));
        let row = out.row_mut(r);
        if total < NORMALIZE_EPS {
            row.fill(1.0 / cols as f64);
        } else {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    out
}

// y_i = s_i / T with T = Σ|s|  ⇒  ∂L/∂s_k = g_k / T − sign(s_k)·(Σ_i g_i s_i) / T²
fn row_normalize_backward(g: &Tensor, input: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(g.rows(), g.cols());
    for r in 0..g.rows() {
        let s = input.row(r);
        let total = l1_norm(s);
        if total < NORMALIZE_EPS {
            continue;
        }
        let gr = g.row(r);
        let dot: f64 = gr.iter().zip(s).map(|(a, b)| a * b).sum();
        let t2 = total * total;
        for ((o, gk), sk) in out.row_mut(r).iter_mut().zip(gr).zip(s) {
            let sign = if *sk > 0.0 { 1.0 } else if *sk < 0.0 { -1.0 } else { 0.0 };
            *o = gk / total - sign * dot / t2;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_rows(&[[1.0, -2.0], [3.0, 4.0]]).unwrap());
        let m = g.mean(w).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Tensor::filled(2, 2, 0.25));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row_vector(&[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(2, 2));
        let r = g.relu(w).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(2, 3));
        let b = g.param(Tensor::ones(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        let c = g.constant(Tensor::ones(3, 2));
        assert!(g.sub(a, c).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(2, 2));
        let c = g.constant(Tensor::filled(2, 2, 3.0));
        let p = g.mul(w, c).unwrap();
        let m = g.mean(p).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap(), &Tensor::filled(2, 2, 0.75));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(3, 3));
        let mut r = rng::stream(1, "dropout", 0);
        assert_eq!(g.dropout(x, 0.0, &mut r).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut r).is_err());
    }

    #[test]
    fn dropout_mask_is_inverted_and_replayed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(20, 20));
        let mut r = rng::stream(1, "dropout", 0);
        let d = g.dropout(x, 0.5, &mut r).unwrap();
        let first = g.value(d).clone();
        assert!(first.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(first.data().iter().any(|&v| v == 0.0));
        let again = g.forward(d).unwrap().clone();
        assert_eq!(first, again);
    }

    #[test]
    fn clamped_log_saturates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(&[0.0, 1.0, 0.5]));
        let l = g.clamped_log(x).unwrap();
        let v = g.value(l).data().to_vec();
        assert_eq!(v[0], LOG_CLAMP.ln());
        assert_eq!(v[1], (1.0 - LOG_CLAMP).ln());
        let s = g.sum(l).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn edge_strength_sums_incident_edges() {
        let mut g = Graph::new();
        // [[0,a,b],[a,0,c],[b,c,0]] with a=1,b=2,c=4
        let e = g.constant(Tensor::row_vector(&[1.0, 2.0, 4.0]));
        let s = g.edge_strength(e, 3).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 5.0, 6.0]);
        assert!(g.edge_strength(e, 4).is_err());
    }

    #[test]
    fn row_normalize_handles_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 3.0], [0.0, 0.0]]).unwrap());
        let n = g.row_normalize(x).unwrap();
        assert_eq!(g.value(n).data(), &[0.25, 0.75, 0.5, 0.5]);
    }

    #[test]
    fn forward_recomputes_after_set_leaf() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(2.0));
        let sq = g.mul(w, w).unwrap();
        g.set_leaf(w, Tensor::scalar(3.0)).unwrap();
        assert_eq!(g.forward(sq).unwrap().item().unwrap(), 9.0);
        assert!(g.set_leaf(sq, Tensor::scalar(1.0)).is_err());
    }
}
