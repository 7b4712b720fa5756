//! Minimal reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] is a static DAG over ten primitives (add, multiply, matmul,
//! conv2d, relu, silu, channel concat, reshape, mean, sum) plus leaf nodes
//! (inputs, parameters, constants). Networks are built once as templates and
//! then evaluated against per-call bindings; [`Graph::backward`] propagates a
//! vector-Jacobian product from any node back to every leaf.
//!
//! Evaluation is pure with respect to the bindings: parameters are read-only
//! during a call, so concurrent evaluations against shared parameters are
//! safe. Optimizer updates ([`adam`]) are single-writer.

mod kernels;

pub mod adam;

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::GraphError;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use rand::Rng;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use kernels::broadcast_shape;

/// Index of a node within its graph.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d(NodeId, NodeId),
    Relu(NodeId),
    Silu(NodeId),
    ConcatChannel(NodeId, NodeId),
    Reshape(NodeId),
    Mean(NodeId, Option<usize>),
    Sum(NodeId, Option<usize>),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Conv2d(a, b)
            | Op::ConcatChannel(a, b) => vec![a, b],
            Op::Relu(a) | Op::Silu(a) | Op::Reshape(a) | Op::Mean(a, _) | Op::Sum(a, _) => {
                vec![a]
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Conv2d(..) => "conv2d",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::ConcatChannel(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: String,
}

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Insert a tensor drawn uniformly from `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut SeededRng,
    ) {
        let bound = (1.0 / fan_in as f32).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }
}

/// Gradients keyed by leaf name, one entry per parameter (zero when the
/// parameter is disconnected from the differentiated node) and one per
/// reachable input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

/// Node values produced by one evaluation.
#[derive(Debug)]
pub struct Values {
    vals: Vec<Option<Tensor>>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.vals[id].as_ref().expect("node was not evaluated")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.vals[id].as_ref()
    }
}

/// A static compute graph over the ten primitives.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        let label = format!("{}#{}", op.kind(), id);
        self.nodes.push(Node { op, shape, label });
        id
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn node_label(&self, id: NodeId) -> &str {
        &self.nodes[id].label
    }

    /// Attach a human-readable label (used in error messages).
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id].label = label.into();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // -- leaves -------------------------------------------------------------

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::Invalid(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape);
        self.set_label(id, format!("input:{name}"));
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        if self.params.contains_key(name) {
            return Err(GraphError::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.push(Op::Param(name.to_string()), shape);
        self.set_label(id, format!("param:{name}"));
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    /// Expose a node under a stable output name.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Parameter names with their declared shapes.
    pub fn param_shapes(&self) -> impl Iterator<Item = (&String, &[usize])> {
        self.params
            .iter()
            .map(|(name, &id)| (name, self.nodes[id].shape.as_slice()))
    }

    // -- primitives ----------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = broadcast_shape(self.node_shape(a), self.node_shape(b)).ok_or_else(|| {
            GraphError::ShapeMismatch {
                node: format!("add({}, {})", self.node_label(a), self.node_label(b)),
                detail: format!(
                    "cannot broadcast {:?} with {:?}",
                    self.node_shape(a),
                    self.node_shape(b)
                ),
            }
        })?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let shape = broadcast_shape(self.node_shape(a), self.node_shape(b)).ok_or_else(|| {
            GraphError::ShapeMismatch {
                node: format!("mul({}, {})", self.node_label(a), self.node_label(b)),
                detail: format!(
                    "cannot broadcast {:?} with {:?}",
                    self.node_shape(a),
                    self.node_shape(b)
                ),
            }
        })?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    /// `a - b`, expressed as `a + (-1) * b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let neg1 = self.constant(Tensor::scalar(-1.0));
        let nb = self.mul(b, neg1)?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.node_shape(a).to_vec(), self.node_shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                node: format!("matmul({}, {})", self.node_label(a), self.node_label(b)),
                detail: format!("incompatible shapes {sa:?} x {sb:?}"),
            });
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Stride-1, same-padded 2-D convolution: `(Ci,H,W) * (Co,Ci,kh,kw)`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId, GraphError> {
        let (sx, sk) = (self.node_shape(x).to_vec(), self.node_shape(k).to_vec());
        let node = format!("conv2d({}, {})", self.node_label(x), self.node_label(k));
        if sx.len() != 3 || sk.len() != 4 {
            return Err(GraphError::ShapeMismatch {
                node,
                detail: format!("need (Ci,H,W) and (Co,Ci,kh,kw), got {sx:?} and {sk:?}"),
            });
        }
        if sk[1] != sx[0] {
            return Err(GraphError::ShapeMismatch {
                node,
                detail: format!("kernel expects {} input channels, image has {}", sk[1], sx[0]),
            });
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(GraphError::ShapeMismatch {
                node,
                detail: format!("same-padding requires odd kernel extents, got {}x{}", sk[2], sk[3]),
            });
        }
        Ok(self.push(Op::Conv2d(x, k), vec![sk[0], sx[1], sx[2]]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::Relu(x), shape)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::Silu(x), shape)
    }

    /// Concatenate along the leading (channel) axis; trailing axes must agree.
    pub fn concat_channel(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.node_shape(a).to_vec(), self.node_shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(GraphError::ShapeMismatch {
                node: format!("concat({}, {})", self.node_label(a), self.node_label(b)),
                detail: format!("trailing dims must agree, got {sa:?} and {sb:?}"),
            });
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        Ok(self.push(Op::ConcatChannel(a, b), shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let numel: usize = shape.iter().product();
        if numel != self.node_shape(x).iter().product::<usize>() || shape.iter().any(|&d| d == 0) {
            return Err(GraphError::ShapeMismatch {
                node: format!("reshape({})", self.node_label(x)),
                detail: format!("cannot reshape {:?} to {shape:?}", self.node_shape(x)),
            });
        }
        Ok(self.push(Op::Reshape(x), shape))
    }

    fn check_axis(&self, x: NodeId, axis: Option<usize>, what: &str) -> Result<(), GraphError> {
        if let Some(ax) = axis {
            if ax >= self.node_shape(x).len() {
                return Err(GraphError::ShapeMismatch {
                    node: format!("{what}({})", self.node_label(x)),
                    detail: format!(
                        "axis {ax} out of range for shape {:?}",
                        self.node_shape(x)
                    ),
                });
            }
        }
        Ok(())
    }

    /// Mean over one axis, or over all elements when `axis` is `None`.
    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        self.check_axis(x, axis, "mean")?;
        let shape = kernels::reduce_shape(self.node_shape(x), axis);
        Ok(self.push(Op::Mean(x, axis), shape))
    }

    /// Sum over one axis, or over all elements when `axis` is `None`.
    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        self.check_axis(x, axis, "sum")?;
        let shape = kernels::reduce_shape(self.node_shape(x), axis);
        Ok(self.push(Op::Sum(x, axis), shape))
    }

    // -- composite helpers ----------------------------------------------------

    /// 2x2 average pooling of a `(C,H,W)` node, expressed as reshape + mean.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.node_shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(GraphError::ShapeMismatch {
                node: format!("avg_pool2({})", self.node_label(x)),
                detail: format!("need (C,2h,2w), got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let r = self.reshape(x, vec![c, h / 2, 2, w / 2, 2])?;
        let m1 = self.mean(r, Some(4))?;
        self.mean(m1, Some(2))
    }

    /// 2x nearest-neighbor upsampling of a `(C,H,W)` node, expressed as a
    /// matmul against a constant replication matrix.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.node_shape(x).to_vec();
        if s.len() != 3 {
            return Err(GraphError::ShapeMismatch {
                node: format!("upsample2({})", self.node_label(x)),
                detail: format!("need (C,H,W), got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut rep = Tensor::zeros(&[h * w, 4 * h * w]);
        {
            let data = rep.data_mut();
            let cols = 4 * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let row = y * w + xx;
                    for p in 0..2 {
                        for q in 0..2 {
                            let col = (2 * y + p) * 2 * w + (2 * xx + q);
                            data[row * cols + col] = 1.0;
                        }
                    }
                }
            }
        }
        let flat = self.reshape(x, vec![c, h * w])?;
        let m = self.constant(rep);
        let up = self.matmul(flat, m)?;
        self.reshape(up, vec![c, 2 * h, 2 * w])
    }

    // -- evaluation -----------------------------------------------------------

    /// Node ids needed to compute `requested` (ancestors, inclusive).
    fn needed_set(&self, requested: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = requested.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            stack.extend(self.nodes[id].op.operands());
        }
        needed
    }

    /// Evaluate the requested nodes against the given bindings.
    ///
    /// Only ancestors of `requested` are computed, so bindings for unrelated
    /// inputs may be omitted. Every computed node is checked for finiteness;
    /// the first offending node is reported by label.
    pub fn eval(
        &self,
        params: &ParamStore,
        inputs: &HashMap<&str, &Tensor>,
        requested: &[NodeId],
    ) -> Result<Values, GraphError> {
        let needed = self.needed_set(requested);
        let mut vals: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let out = match &node.op {
                Op::Input(name) => {
                    let t = *inputs
                        .get(name.as_str())
                        .ok_or_else(|| GraphError::UnboundInput { name: name.clone() })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::ShapeMismatch {
                            node: node.label.clone(),
                            detail: format!(
                                "bound tensor has shape {:?}, expected {:?}",
                                t.shape(),
                                node.shape
                            ),
                        });
                    }
                    t.clone()
                }
                Op::Param(name) => {
                    let t = params
                        .get(name)
                        .ok_or_else(|| GraphError::MissingParam { name: name.clone() })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::ShapeMismatch {
                            node: node.label.clone(),
                            detail: format!(
                                "parameter has shape {:?}, expected {:?}",
                                t.shape(),
                                node.shape
                            ),
                        });
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => kernels::broadcast_zip(
                    vals[*a].as_ref().unwrap(),
                    vals[*b].as_ref().unwrap(),
                    |x, y| x + y,
                ),
                Op::Mul(a, b) => kernels::broadcast_zip(
                    vals[*a].as_ref().unwrap(),
                    vals[*b].as_ref().unwrap(),
                    |x, y| x * y,
                ),
                Op::MatMul(a, b) => {
                    kernels::matmul(vals[*a].as_ref().unwrap(), vals[*b].as_ref().unwrap())
                }
                Op::Conv2d(x, k) => {
                    kernels::conv2d(vals[*x].as_ref().unwrap(), vals[*k].as_ref().unwrap())
                }
                Op::Relu(x) => kernels::relu(vals[*x].as_ref().unwrap()),
                Op::Silu(x) => kernels::silu(vals[*x].as_ref().unwrap()),
                Op::ConcatChannel(a, b) => {
                    let (ta, tb) = (vals[*a].as_ref().unwrap(), vals[*b].as_ref().unwrap());
                    let mut data = Vec::with_capacity(ta.numel() + tb.numel());
                    data.extend_from_slice(ta.data());
                    data.extend_from_slice(tb.data());
                    Tensor::new(node.shape.clone(), data).expect("concat shape")
                }
                Op::Reshape(x) => Tensor::new(
                    node.shape.clone(),
                    vals[*x].as_ref().unwrap().data().to_vec(),
                )
                .expect("reshape shape"),
                Op::Mean(x, axis) => {
                    let t = vals[*x].as_ref().unwrap();
                    let len = match axis {
                        None => t.numel(),
                        Some(ax) => t.shape()[*ax],
                    };
                    kernels::reduce_sum(t, *axis).scaled(1.0 / len as f32)
                }
                Op::Sum(x, axis) => kernels::reduce_sum(vals[*x].as_ref().unwrap(), *axis),
            };
            if !out.is_all_finite() {
                return Err(GraphError::NonFinite {
                    node: node.label.clone(),
                });
            }
            debug_assert_eq!(out.shape(), node.shape.as_slice(), "shape inference bug");
            vals[id] = Some(out);
        }
        Ok(Values { vals })
    }

    // -- reverse pass ----------------------------------------------------------

    /// Propagate `adjoint` from node `at` back to every leaf.
    ///
    /// Returns one gradient per parameter (zeros when disconnected) and one
    /// per input that is reachable from `at`.
    pub fn backward(
        &self,
        values: &Values,
        at: NodeId,
        adjoint: Tensor,
    ) -> Result<Gradients, GraphError> {
        let node_shape = self.node_shape(at);
        if adjoint.shape() != node_shape {
            return Err(GraphError::AdjointMismatch {
                node: self.node_label(at).to_string(),
                adjoint: adjoint.shape().to_vec(),
                node_shape: node_shape.to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[at] = Some(adjoint);

        fn accum(slot: &mut Option<Tensor>, t: Tensor) {
            match slot {
                Some(existing) => *existing = existing.zip_map(&t, |a, b| a + b),
                None => *slot = Some(t),
            }
        }

        let mut grads = Gradients {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for id in (0..=at).rev() {
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input(name) => {
                    let slot = grads.inputs.entry(name.clone()).or_insert_with(|| {
                        Tensor::zeros(&node.shape)
                    });
                    *slot = slot.zip_map(&adj, |a, b| a + b);
                }
                Op::Param(name) => {
                    let slot = grads.params.entry(name.clone()).or_insert_with(|| {
                        Tensor::zeros(&node.shape)
                    });
                    *slot = slot.zip_map(&adj, |a, b| a + b);
                }
                Op::Const(_) => {}
                Op::Add(a, b) => {
                    let ga = kernels::unbroadcast(&adj, self.node_shape(*a));
                    let gb = kernels::unbroadcast(&adj, self.node_shape(*b));
                    accum(&mut adjoints[*a], ga);
                    accum(&mut adjoints[*b], gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (values.get(*a), values.get(*b));
                    let ga = kernels::unbroadcast(
                        &kernels::broadcast_zip(&adj, tb, |g, y| g * y),
                        self.node_shape(*a),
                    );
                    let gb = kernels::unbroadcast(
                        &kernels::broadcast_zip(&adj, ta, |g, x| g * x),
                        self.node_shape(*b),
                    );
                    accum(&mut adjoints[*a], ga);
                    accum(&mut adjoints[*b], gb);
                }
                Op::MatMul(a, b) => {
                    accum(&mut adjoints[*a], kernels::matmul_grad_a(&adj, values.get(*b)));
                    accum(&mut adjoints[*b], kernels::matmul_grad_b(values.get(*a), &adj));
                }
                Op::Conv2d(x, k) => {
                    accum(
                        &mut adjoints[*x],
                        kernels::conv2d_grad_input(&adj, values.get(*k), self.node_shape(*x)),
                    );
                    accum(
                        &mut adjoints[*k],
                        kernels::conv2d_grad_kernel(values.get(*x), &adj, self.node_shape(*k)),
                    );
                }
                Op::Relu(x) => {
                    accum(&mut adjoints[*x], kernels::relu_grad(values.get(*x), &adj));
                }
                Op::Silu(x) => {
                    accum(&mut adjoints[*x], kernels::silu_grad(values.get(*x), &adj));
                }
                Op::ConcatChannel(a, b) => {
                    let na = values.get(*a).numel();
                    let ga = Tensor::new(
                        self.node_shape(*a).to_vec(),
                        adj.data()[..na].to_vec(),
                    )
                    .expect("concat grad split");
                    let gb = Tensor::new(
                        self.node_shape(*b).to_vec(),
                        adj.data()[na..].to_vec(),
                    )
                    .expect("concat grad split");
                    accum(&mut adjoints[*a], ga);
                    accum(&mut adjoints[*b], gb);
                }
                Op::Reshape(x) => {
                    let g = Tensor::new(self.node_shape(*x).to_vec(), adj.data().to_vec())
                        .expect("reshape grad");
                    accum(&mut adjoints[*x], g);
                }
                Op::Mean(x, axis) => {
                    let in_shape = self.node_shape(*x);
                    let len = match axis {
                        None => in_shape.iter().product(),
                        Some(ax) => in_shape[*ax],
                    };
                    accum(
                        &mut adjoints[*x],
                        kernels::reduce_grad(&adj, in_shape, *axis, 1.0 / len as f32),
                    );
                }
                Op::Sum(x, axis) => {
                    accum(
                        &mut adjoints[*x],
                        kernels::reduce_grad(&adj, self.node_shape(*x), *axis, 1.0),
                    );
                }
            }
        }

        // Disconnected parameters get explicit zero gradients.
        for (name, &pid) in &self.params {
            grads
                .params
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&self.nodes[pid].shape));
        }
        Ok(grads)
    }

    /// Evaluate a scalar loss node and backpropagate to every leaf.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        inputs: &HashMap<&str, &Tensor>,
        loss: NodeId,
    ) -> Result<(f32, Gradients), GraphError> {
        if self.node_shape(loss).iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: self.node_label(loss).to_string(),
                shape: self.node_shape(loss).to_vec(),
            });
        }
        let values = self.eval(params, inputs, &[loss])?;
        let loss_value = values.get(loss).item();
        let adjoint = Tensor::new(self.node_shape(loss).to_vec(), vec![1.0]).expect("scalar");
        let grads = self.backward(&values, loss, adjoint)?;
        Ok((loss_value, grads))
    }
}
