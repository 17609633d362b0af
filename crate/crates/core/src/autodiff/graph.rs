use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Spatial axis of a rank-4 NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along width (columns).
    X,
    /// Along height (rows).
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    Param(String),
    /// Index into the graph's constant table.
    Const(usize),
    /// inputs: x `[n, in]`, w `[out, in]`, b `[out]`
    Dense,
    /// inputs: x `[n, cin, h, w]`, w `[cout, cin, k, k]`, b `[cout]`
    Conv2d {
        stride: usize,
    },
    Upsample2,
    Reshape,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Square,
    Sum,
    Mean,
    /// Mean over the leading (batch) axis, keeping it with length 1.
    BatchMean,
    /// Repeats a batch-1 tensor along the batch axis.
    TileBatch(usize),
    /// Concatenation along axis 1.
    Concat,
    /// inputs: src `[n, c, h, w]`, displacement `[n, 2, h, w]`
    GridSample,
    ForwardDiff(Axis),
    BoxMean {
        radius: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Static computation graph; nodes are stored in topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consts: Vec<Tensor<f64>>,
    outputs: BTreeMap<String, NodeId>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub(crate) fn constant_value(&self, idx: usize) -> &Tensor<f64> {
        &self.consts[idx]
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Names a node so that callers can look up its value after `forward`.
    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    /// `(name, shape)` for every parameter node.
    pub fn param_specs(&self) -> Vec<(&str, &[usize])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some((name.as_str(), n.shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn input_specs(&self) -> Vec<(&str, &[usize])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some((name.as_str(), n.shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    fn mismatch(&self, expected: &[usize], actual: &[usize], context: &str) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
            context: context.to_string(),
        }
    }

    fn leaf_shape_ok(&self, shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("invalid leaf shape {shape:?}")));
        }
        Ok(())
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.leaf_shape_ok(shape)?;
        let name = name.into();
        if let Some(id) = self.find_leaf(|op| matches!(op, Op::Input(n) if *n == name)) {
            if self.nodes[id].shape != shape {
                return Err(self.mismatch(&self.nodes[id].shape, shape, "redeclared input"));
            }
            return Ok(id);
        }
        Ok(self.push(Op::Input(name), vec![], shape.to_vec()))
    }

    /// Parameter leaf; repeated declarations of one name share the node.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.leaf_shape_ok(shape)?;
        let name = name.into();
        if let Some(id) = self.find_leaf(|op| matches!(op, Op::Param(n) if *n == name)) {
            if self.nodes[id].shape != shape {
                return Err(self.mismatch(&self.nodes[id].shape, shape, "redeclared parameter"));
            }
            return Ok(id);
        }
        Ok(self.push(Op::Param(name), vec![], shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor<f64>) -> NodeId {
        let shape = value.shape().to_vec();
        self.consts.push(value);
        self.push(Op::Const(self.consts.len() - 1), vec![], shape)
    }

    fn find_leaf(&self, pred: impl Fn(&Op) -> bool) -> Option<NodeId> {
        self.nodes.iter().position(|n| pred(&n.op))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(self.mismatch(&[0, 0], &xs, "dense expects [n, in] input and [out, in] weight"));
        }
        if ws[1] != xs[1] {
            return Err(self.mismatch(&[ws[0], xs[1]], &ws, "dense weight"));
        }
        if self.shape(b) != [ws[0]] {
            return Err(self.mismatch(&[ws[0]], self.shape(b), "dense bias"));
        }
        Ok(self.push(Op::Dense, vec![x, w, b], vec![xs[0], ws[0]]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(self.mismatch(&[0, 0, 0, 0], &xs, "conv2d input must be rank 4"));
        }
        if ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(self.mismatch(&[0, xs[1], 3, 3], &ws, "conv2d weight [cout, cin, k, k], k odd"));
        }
        if self.shape(b) != [ws[0]] {
            return Err(self.mismatch(&[ws[0]], self.shape(b), "conv2d bias"));
        }
        if stride == 0 || (stride > 1 && (!xs[2].is_multiple_of(stride) || !xs[3].is_multiple_of(stride))) {
            return Err(self.mismatch(&xs, &xs, "spatial dims must be divisible by the stride"));
        }
        let pad = ws[2] / 2;
        let ho = (xs[2] + 2 * pad - ws[2]) / stride + 1;
        let wo = (xs[3] + 2 * pad - ws[2]) / stride + 1;
        Ok(self.push(Op::Conv2d { stride }, vec![x, w, b], vec![xs[0], ws[0], ho, wo]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(self.mismatch(&[0, 0, 0, 0], &xs, "upsample expects rank 4"));
        }
        Ok(self.push(Op::Upsample2, vec![x], vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3]]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(self.mismatch(shape, self.shape(x), "reshape element count"));
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec()))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(op, vec![x], s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(Op::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square, x)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(factor), x)
    }

    pub fn add_scalar(&mut self, x: NodeId, value: f64) -> NodeId {
        self.unary(Op::AddScalar(value), x)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            let sb = self.shape(b).to_vec();
            return Err(self.mismatch(&sa, &sb, &format!("{op:?} operands")));
        }
        Ok(self.push(op, vec![a, b], sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x], vec![1])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x], vec![1])
    }

    pub fn batch_mean(&mut self, x: NodeId) -> NodeId {
        let mut s = self.shape(x).to_vec();
        s[0] = 1;
        self.push(Op::BatchMean, vec![x], s)
    }

    pub fn tile_batch(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let mut s = self.shape(x).to_vec();
        if s[0] != 1 || n == 0 {
            return Err(self.mismatch(&[1], &s, "tile_batch needs a batch-1 input"));
        }
        s[0] = n;
        Ok(self.push(Op::TileBatch(n), vec![x], s))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("empty concat"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(self.mismatch(&[0, 0], &first, "concat needs rank >= 2"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                let s = s.to_vec();
                return Err(self.mismatch(&first, &s, "concat operands differ off axis 1"));
            }
            channels += s[1];
        }
        let mut shape = first;
        shape[1] = channels;
        Ok(self.push(Op::Concat, parts.to_vec(), shape))
    }

    pub fn grid_sample(&mut self, src: NodeId, disp: NodeId) -> Result<NodeId> {
        let ss = self.shape(src).to_vec();
        let ds = self.shape(disp).to_vec();
        if ss.len() != 4 || ds.len() != 4 {
            return Err(self.mismatch(&[0, 0, 0, 0], &ss, "grid_sample expects rank 4"));
        }
        let expected = vec![ss[0], 2, ss[2], ss[3]];
        if ds != expected {
            return Err(self.mismatch(&expected, &ds, "grid_sample displacement"));
        }
        Ok(self.push(Op::GridSample, vec![src, disp], ss))
    }

    pub fn forward_diff(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        let mut s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch(&[0, 0, 0, 0], &s, "forward_diff expects rank 4"));
        }
        let dim = match axis {
            Axis::X => 3,
            Axis::Y => 2,
        };
        if s[dim] < 2 {
            return Err(self.mismatch(&[2], &s, "forward_diff needs at least two samples"));
        }
        s[dim] -= 1;
        Ok(self.push(Op::ForwardDiff(axis), vec![x], s))
    }

    /// Windowed mean over a `window × window` neighbourhood (odd window).
    pub fn box_mean(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        if window.is_multiple_of(2) {
            return Err(Error::invalid(format!("window {window} must be odd")));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch(&[0, 0, 0, 0], &s, "box_mean expects rank 4"));
        }
        Ok(self.push(Op::BoxMean { radius: window / 2 }, vec![x], s))
    }
}
