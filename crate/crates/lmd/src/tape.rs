//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`TapeGraph`] is an append-only Wengert list: every operation records its
//! inputs and caches its primal value, and [`TapeGraph::backward`] replays the
//! list once in reverse to accumulate adjoints. One tape per unrolled solver
//! run; independent tapes never share state, so batches can run on separate
//! threads.
//!
//! Kink conventions: `max_zero` and `leaky_relu` differentiate the kink from
//! the right branch (slope of the positive branch), `log_sum_exp` subtracts
//! the row max before exponentiating.

use crate::linalg::{self, LinalgError};
use crate::tensor::{Tensor, TensorError};
use std::fmt;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    Shape(TensorError),
    Linalg(LinalgError),
    UnknownNode(NodeId),
    RootNotScalar { shape: Vec<usize> },
    /// Inputs must already be on the tape with smaller ids.
    InputOrder { node: NodeId, input: NodeId },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(e) => write!(f, "shape error: {e}"),
            Self::Linalg(e) => write!(f, "linear algebra error: {e}"),
            Self::UnknownNode(id) => write!(f, "unknown node id {id}"),
            Self::RootNotScalar { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            Self::InputOrder { node, input } => {
                write!(f, "node {node} consumes not-yet-recorded input {input}")
            }
        }
    }
}

impl std::error::Error for TapeError {}

impl From<TensorError> for TapeError {
    fn from(e: TensorError) -> Self {
        Self::Shape(e)
    }
}

impl From<LinalgError> for TapeError {
    fn from(e: LinalgError) -> Self {
        Self::Linalg(e)
    }
}

/// Operation kinds recordable on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// scalar node times tensor node
    ScalarMul(NodeId, NodeId),
    /// elementwise product
    Mul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    /// reduce all entries to a scalar
    SumReduce(NodeId),
    Dot(NodeId, NodeId),
    /// hinge nonlinearity max(0, x)
    MaxZero(NodeId),
    /// vector -> scalar, matrix -> per-row vector; max-stabilized
    LogSumExp(NodeId),
    /// square matrix inverse
    Inverse(NodeId),
    /// same data, new shape
    Reshape(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::ScalarMul(a, b)
            | Op::Mul(a, b)
            | Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::SumReduce(a)
            | Op::MaxZero(a)
            | Op::LogSumExp(a)
            | Op::Inverse(a)
            | Op::Reshape(a) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    primal: Tensor,
    /// False for constant leaves and anything computed only from them;
    /// backward skips accumulating adjoints into such nodes.
    needs_grad: bool,
}

/// Stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Default tape since most graphs start empty.
#[derive(Default)]
pub struct TapeGraph {
    nodes: Vec<Node>,
    keyed: std::collections::HashMap<u64, NodeId>,
}

impl TapeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn primal(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].primal
    }

    fn push(&mut self, op: Op, primal: Tensor) -> Result<NodeId, TapeError> {
        let id = self.nodes.len();
        let mut needs_grad = matches!(op, Op::Leaf);
        for input in op.inputs() {
            if input >= id {
                return Err(TapeError::InputOrder { node: id, input });
            }
            needs_grad |= self.nodes[input].needs_grad;
        }
        self.nodes.push(Node { op, primal, needs_grad });
        Ok(id)
    }

    fn get(&self, id: NodeId) -> Result<&Tensor, TapeError> {
        self.nodes
            .get(id)
            .map(|n| &n.primal)
            .ok_or(TapeError::UnknownNode(id))
    }

    /// Insert a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t).expect("leaf has no inputs")
    }

    /// Insert a constant: no adjoint is accumulated into it.
    pub fn const_leaf(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t).expect("leaf has no inputs");
        self.nodes[id].needs_grad = false;
        id
    }

    /// Constant leaf memoized by caller-chosen key, so repeated graph
    /// builders can share one copy of a large constant per tape.
    pub fn const_leaf_keyed(&mut self, key: u64, make: impl FnOnce() -> Tensor) -> NodeId {
        if let Some(&id) = self.keyed.get(&key) {
            return id;
        }
        let id = self.const_leaf(make());
        self.keyed.insert(key, id);
        id
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.const_leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.add(self.get(b)?)?;
        self.push(Op::Add(a, b), p)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.sub(self.get(b)?)?;
        self.push(Op::Sub(a, b), p)
    }

    /// Product of a scalar node and a tensor node.
    pub fn scalar_mul(&mut self, s: NodeId, t: NodeId) -> Result<NodeId, TapeError> {
        let sv = self.get(s)?;
        if !sv.is_scalar() {
            return Err(TapeError::Shape(TensorError::RankMismatch {
                op: "scalar_mul",
                shape: sv.shape().to_vec(),
            }));
        }
        let p = self.get(t)?.scale(sv.scalar_value());
        self.push(Op::ScalarMul(s, t), p)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.mul(self.get(b)?)?;
        self.push(Op::Mul(a, b), p)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(m)?.matvec(self.get(v)?)?;
        self.push(Op::MatVec(m, v), p)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.matmul(self.get(b)?)?;
        self.push(Op::MatMul(a, b), p)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.transpose()?;
        self.push(Op::Transpose(a), p)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(f64::exp);
        self.push(Op::Exp(a), p)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(f64::ln);
        self.push(Op::Log(a), p)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(|v| v * v);
        self.push(Op::Square(a), p)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(|v| if v >= 0.0 { v } else { alpha * v });
        self.push(Op::LeakyRelu(a, alpha), p)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(softplus);
        self.push(Op::Softplus(a), p)
    }

    pub fn sum_reduce(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = Tensor::scalar(self.get(a)?.sum());
        self.push(Op::SumReduce(a), p)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let p = Tensor::scalar(self.get(a)?.dot(self.get(b)?)?);
        self.push(Op::Dot(a, b), p)
    }

    pub fn max_zero(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.map(|v| v.max(0.0));
        self.push(Op::MaxZero(a), p)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let input = self.get(a)?;
        let p = if input.is_vector() {
            Tensor::scalar(lse_slice(input.data()))
        } else if input.is_matrix() {
            let (r, c) = (input.rows(), input.cols());
            let mut out = Vec::with_capacity(r);
            for i in 0..r {
                out.push(lse_slice(&input.data()[i * c..(i + 1) * c]));
            }
            Tensor::vector(out)
        } else {
            return Err(TapeError::Shape(TensorError::RankMismatch {
                op: "log_sum_exp",
                shape: input.shape().to_vec(),
            }));
        };
        self.push(Op::LogSumExp(a), p)
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let p = linalg::inverse(self.get(a)?)?;
        self.push(Op::Inverse(a), p)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TapeError> {
        let p = self.get(a)?.reshaped(shape)?;
        self.push(Op::Reshape(a), p)
    }

    /// Reverse pass from a scalar root. Returns one gradient tensor per node
    /// (zero for nodes the root does not reach), indexable by `NodeId`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        let root_primal = self.get(root)?;
        if !root_primal.is_scalar() {
            return Err(TapeError::RootNotScalar {
                shape: root_primal.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_into_inputs(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].primal.shape())))
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate_into_inputs(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TapeError> {
        let node = &self.nodes[id];
        let needs = |target: NodeId| self.nodes[target].needs_grad;
        let acc = |target: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(t) => t.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, g.clone(), grads);
                acc(b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(a, g.clone(), grads);
                if needs(b) {
                    acc(b, g.scale(-1.0), grads);
                }
            }
            Op::ScalarMul(s, t) => {
                let tv = &self.nodes[t].primal;
                let sv = self.nodes[s].primal.scalar_value();
                if needs(s) {
                    acc(s, Tensor::scalar(g.dot(tv)?), grads);
                }
                if needs(t) {
                    acc(t, g.scale(sv), grads);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.mul(&self.nodes[b].primal)?, grads);
                }
                if needs(b) {
                    acc(b, g.mul(&self.nodes[a].primal)?, grads);
                }
            }
            Op::MatVec(m, v) => {
                // out = M v: dM = g vᵀ, dv = Mᵀ g
                let mv = &self.nodes[m].primal;
                let vv = &self.nodes[v].primal;
                if needs(m) {
                    let (r, c) = (mv.rows(), mv.cols());
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = g.data()[i];
                        if gi != 0.0 {
                            for j in 0..c {
                                dm[i * c + j] = gi * vv.data()[j];
                            }
                        }
                    }
                    acc(m, Tensor::new(vec![r, c], dm)?, grads);
                }
                if needs(v) {
                    acc(v, mv.matvec_t(g)?, grads);
                }
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a].primal;
                let bv = &self.nodes[b].primal;
                if needs(a) {
                    acc(a, g.matmul(&bv.transpose()?)?, grads);
                }
                if needs(b) {
                    acc(b, av.transpose()?.matmul(g)?, grads);
                }
            }
            Op::Transpose(a) => {
                acc(a, g.transpose()?, grads);
            }
            Op::Exp(a) => {
                acc(a, g.mul(&node.primal)?, grads);
            }
            Op::Log(a) => {
                acc(a, g.mul(&self.nodes[a].primal.map(|v| 1.0 / v))?, grads);
            }
            Op::Square(a) => {
                acc(a, g.mul(&self.nodes[a].primal.map(|v| 2.0 * v))?, grads);
            }
            Op::LeakyRelu(a, alpha) => {
                if needs(a) {
                    let m = self.nodes[a].primal.map(|v| if v >= 0.0 { 1.0 } else { alpha });
                    acc(a, g.mul(&m)?, grads);
                }
            }
            Op::Softplus(a) => {
                if needs(a) {
                    let m = self.nodes[a].primal.map(sigmoid);
                    acc(a, g.mul(&m)?, grads);
                }
            }
            Op::SumReduce(a) => {
                if needs(a) {
                    let shape = self.nodes[a].primal.shape();
                    acc(a, Tensor::full(shape, g.scalar_value()), grads);
                }
            }
            Op::Dot(a, b) => {
                let gv = g.scalar_value();
                if needs(a) {
                    acc(a, self.nodes[b].primal.scale(gv), grads);
                }
                if needs(b) {
                    acc(b, self.nodes[a].primal.scale(gv), grads);
                }
            }
            Op::MaxZero(a) => {
                if needs(a) {
                    let m = self.nodes[a].primal.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
                    acc(a, g.mul(&m)?, grads);
                }
            }
            Op::LogSumExp(a) => {
                if needs(a) {
                    let input = &self.nodes[a].primal;
                    if input.is_vector() {
                        let gv = g.scalar_value();
                        let lse = node.primal.scalar_value();
                        acc(a, input.map(|v| gv * (v - lse).exp()), grads);
                    } else {
                        let (r, c) = (input.rows(), input.cols());
                        let mut d = vec![0.0; r * c];
                        for i in 0..r {
                            let gi = g.data()[i];
                            let lse = node.primal.data()[i];
                            for j in 0..c {
                                d[i * c + j] = gi * (input.data()[i * c + j] - lse).exp();
                            }
                        }
                        acc(a, Tensor::new(vec![r, c], d)?, grads);
                    }
                }
            }
            Op::Inverse(a) => {
                if needs(a) {
                    // Y = X⁻¹: dX = -Yᵀ G Yᵀ
                    let yt = node.primal.transpose()?;
                    let d = yt.matmul(g)?.matmul(&yt)?.scale(-1.0);
                    acc(a, d, grads);
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let shape = self.nodes[a].primal.shape().to_vec();
                    acc(a, g.reshaped(shape)?, grads);
                }
            }
        }
        Ok(())
    }
}

fn lse_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Gradient buffers from one backward pass, one per tape node.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id]
    }
}
