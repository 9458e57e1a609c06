//! Append-only tape of tensor primitives with forward evaluation and
//! reverse-mode accumulation.
//!
//! A [`Graph`] is built once (inputs, constants, primitive ops) and can then
//! be evaluated any number of times with different bound inputs. Each node
//! only references earlier nodes, so the node order is a topological order and
//! one reverse sweep visits every node exactly once.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Named tensors bound to (or produced by) a graph.
pub type Tensors = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, requires_grad: bool },
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    Reshape(NodeId, Vec<usize>),
    Transpose(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    LeakyRelu(NodeId, f64),
    Step(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Select(NodeId, usize),
    SelectCols(NodeId, Vec<usize>),
    TileRows { input: NodeId, block: usize, times: usize },
    OrderStat(NodeId, usize),
    TailMean(NodeId, usize),
    L1Normalize(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Exp(_) => "exp",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Step(_) => "step",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Select(..) => "select",
            Op::SelectCols(..) => "select_cols",
            Op::TileRows { .. } => "tile_rows",
            Op::OrderStat(..) => "order_statistic",
            Op::TailMean(..) => "tail_mean",
            Op::L1Normalize(..) => "l1_normalize",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(xs, _) => xs.clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Reshape(a, _)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::LeakyRelu(a, _)
            | Op::Step(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Select(a, _)
            | Op::SelectCols(a, _)
            | Op::TileRows { input: a, .. }
            | Op::OrderStat(a, _)
            | Op::TailMean(a, _)
            | Op::L1Normalize(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    // Row-wise selections saved by order statistics / degenerate-row flags.
    saved: Vec<usize>,
}

/// L1 norms below this are treated as zero by the row normalizer.
pub const L1_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    evaluated: bool,
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

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i.0 < self.nodes.len(), "node input must precede node");
        }
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            value: None,
            saved: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named free input. Declaring the same name twice returns the
    /// existing node.
    pub fn input(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            requires_grad,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Const);
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn set_requires_grad(&mut self, name: &str, flag: bool) {
        if let Some(&id) = self.inputs.get(name) {
            if let Op::Input { requires_grad, .. } = &mut self.nodes[id.0].op {
                *requires_grad = flag;
            }
        }
    }

    /// Sets `requires_grad` on every input whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        let names: Vec<String> = self
            .inputs
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        for n in names {
            self.set_requires_grad(&n, flag);
        }
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    // ---- builders -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::AddScalar(a, k))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(parts.to_vec(), axis))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(a, slope))
    }
    /// Heaviside step `1{x >= 0}`; zero gradient everywhere.
    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Step(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    /// Sum of a matrix along `axis`, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumAxis(a, axis))
    }
    /// Single element by flat index, as a scalar.
    pub fn select(&mut self, a: NodeId, flat_index: usize) -> NodeId {
        self.push(Op::Select(a, flat_index))
    }
    /// Gathers the given columns of a matrix (or entries of a vector).
    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        self.push(Op::SelectCols(a, cols.to_vec()))
    }
    /// Repeats each consecutive block of `block` rows `times` times.
    pub fn tile_rows(&mut self, a: NodeId, block: usize, times: usize) -> NodeId {
        self.push(Op::TileRows {
            input: a,
            block,
            times,
        })
    }
    /// `index`-th smallest value (1-based). A vector yields a scalar; a
    /// matrix yields one order statistic per row as an `rows x 1` column.
    /// Ties go to the lowest original position.
    pub fn order_statistic(&mut self, a: NodeId, index: usize) -> NodeId {
        self.push(Op::OrderStat(a, index))
    }
    /// Mean of the `m` smallest values, per row for matrices.
    pub fn tail_mean(&mut self, a: NodeId, m: usize) -> NodeId {
        self.push(Op::TailMean(a, m))
    }
    /// Per-row `kappa * h / ||h||_1`; rows with norm below [`L1_DEGENERATE`]
    /// become equal weights `kappa / n`.
    pub fn l1_normalize(&mut self, a: NodeId, kappa: f64) -> NodeId {
        self.push(Op::L1Normalize(a, kappa))
    }

    // ---- evaluation -----------------------------------------------------

    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = *self
            .inputs
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        self.nodes[id.0].value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    /// Binds every tensor whose name matches a declared input, ignoring the
    /// rest.
    pub fn bind_matching<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) {
        for (name, t) in tensors {
            if let Some(&id) = self.inputs.get(name.as_str()) {
                self.nodes[id.0].value = Some(t.clone());
                self.evaluated = false;
            }
        }
    }

    pub fn bound_value(&self, name: &str) -> Option<&Tensor> {
        self.inputs
            .get(name)
            .and_then(|id| self.nodes[id.0].value.as_ref())
    }

    /// Binds `inputs`, runs the forward pass, and returns the marked outputs.
    pub fn evaluate(&mut self, inputs: &Tensors) -> Result<Tensors> {
        self.bind_matching(inputs);
        self.forward()?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.nodes[id.0].value.clone().unwrap()))
            .collect())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Forward pass over the whole tape using currently bound inputs.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input { name, .. } => {
                    if self.nodes[i].value.is_none() {
                        return Err(Error::UnboundInput(name.clone()));
                    }
                }
                Op::Const => {}
                _ => {
                    let (value, saved) = self.eval_node(i)?;
                    self.nodes[i].value = Some(value);
                    self.nodes[i].saved = saved;
                }
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs evaluated before use")
    }

    fn shape_err(&self, i: usize, detail: String) -> Error {
        Error::Shape {
            node: i,
            op: self.nodes[i].op.name(),
            detail,
        }
    }

    fn eval_node(&self, i: usize) -> Result<(Tensor, Vec<usize>)> {
        let op = &self.nodes[i].op;
        let out = match op {
            Op::Input { .. } | Op::Const => unreachable!(),
            Op::Add(a, b) => self.binary(i, *a, *b, |x, y| x + y)?,
            Op::Sub(a, b) => self.binary(i, *a, *b, |x, y| x - y)?,
            Op::Mul(a, b) => self.binary(i, *a, *b, |x, y| x * y)?,
            Op::Div(a, b) => self.binary(i, *a, *b, |x, y| x / y)?,
            Op::Neg(a) => self.val(*a).map(|x| -x),
            Op::Scale(a, k) => {
                let k = *k;
                self.val(*a).map(|x| k * x)
            }
            Op::AddScalar(a, k) => {
                let k = *k;
                self.val(*a).map(|x| x + k)
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                    return Err(self.shape_err(
                        i,
                        format!("{:?} x {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                Tensor::new(vec![m, n], matmul(ta.data(), tb.data(), m, k, n))?
            }
            Op::Concat(parts, axis) => {
                let first = self.val(parts[0]).shape().to_vec();
                let axis = *axis;
                if axis >= first.len() {
                    return Err(self.shape_err(i, format!("axis {axis} for shape {first:?}")));
                }
                let mut out_shape = first.clone();
                out_shape[axis] = 0;
                for p in parts {
                    let s = self.val(*p).shape();
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(d, (x, y))| d == axis || x == y);
                    if !compatible {
                        return Err(self.shape_err(i, format!("{s:?} vs {first:?} on axis {axis}")));
                    }
                    out_shape[axis] += s[axis];
                }
                let outer: usize = first[..axis].iter().product();
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let t = self.val(*p);
                        let chunk = t.numel() / outer.max(1);
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(out_shape, data)?
            }
            Op::Reshape(a, shape) => {
                let t = self.val(*a);
                let numel: usize = shape.iter().product();
                if numel != t.numel() {
                    return Err(self.shape_err(i, format!("{:?} -> {shape:?}", t.shape())));
                }
                Tensor::new(shape.clone(), t.data().to_vec())?
            }
            Op::Transpose(a) => {
                let t = self.val(*a);
                if t.rank() != 2 {
                    return Err(self.shape_err(i, format!("rank {} input", t.rank())));
                }
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut data = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        data[y * r + x] = t.data()[x * c + y];
                    }
                }
                Tensor::new(vec![c, r], data)?
            }
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Abs(a) => self.val(*a).map(f64::abs),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.val(*a).map(|x| if x > 0.0 { x } else { s * x })
            }
            Op::Step(a) => self.val(*a).map(|x| if x >= 0.0 { 1.0 } else { 0.0 }),
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = self.val(*a);
                if t.numel() == 0 {
                    return Err(self.shape_err(i, "mean of empty tensor".into()));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            Op::SumAxis(a, axis) => {
                let t = self.val(*a);
                if t.rank() != 2 || *axis > 1 {
                    return Err(self.shape_err(i, format!("axis {axis} on {:?}", t.shape())));
                }
                let (r, c) = (t.shape()[0], t.shape()[1]);
                if *axis == 0 {
                    let mut out = vec![0.0; c];
                    for row in t.data().chunks_exact(c.max(1)) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    Tensor::new(vec![1, c], out)?
                } else {
                    let out = t.data().chunks_exact(c.max(1)).map(|row| row.iter().sum()).collect();
                    Tensor::new(vec![r, 1], out)?
                }
            }
            Op::Select(a, idx) => {
                let t = self.val(*a);
                if *idx >= t.numel() {
                    return Err(Error::IndexOutOfRange {
                        index: *idx,
                        len: t.numel(),
                    });
                }
                Tensor::scalar(t.data()[*idx])
            }
            Op::SelectCols(a, cols) => {
                let t = self.val(*a);
                let (r, c) = t.dims2();
                if t.rank() == 0 || t.rank() > 2 {
                    return Err(self.shape_err(i, format!("rank {} input", t.rank())));
                }
                if let Some(bad) = cols.iter().find(|&&j| j >= c) {
                    return Err(self.shape_err(i, format!("column {bad} of {c}")));
                }
                let mut data = Vec::with_capacity(r * cols.len());
                for row in 0..r {
                    let base = row * c;
                    data.extend(cols.iter().map(|&j| t.data()[base + j]));
                }
                let shape = if t.rank() == 1 {
                    vec![cols.len()]
                } else {
                    vec![r, cols.len()]
                };
                Tensor::new(shape, data)?
            }
            Op::TileRows {
                input,
                block,
                times,
            } => {
                let t = self.val(*input);
                if t.rank() != 2 || *block == 0 || t.shape()[0] % block != 0 {
                    return Err(self.shape_err(
                        i,
                        format!("block {block} over {:?}", t.shape()),
                    ));
                }
                let c = t.shape()[1];
                let r = t.shape()[0];
                let width = block * c;
                let mut data = Vec::with_capacity(t.numel() * times);
                for chunk in t.data().chunks_exact(width.max(1)) {
                    for _ in 0..*times {
                        data.extend_from_slice(chunk);
                    }
                }
                Tensor::new(vec![r * times, c], data)?
            }
            Op::OrderStat(a, k) => {
                let t = self.val(*a);
                let (rows, n) = self.row_view(i, t)?;
                if *k == 0 || *k > n {
                    return Err(Error::IndexOutOfRange { index: *k, len: n });
                }
                let mut picks = Vec::with_capacity(rows);
                let mut out = Vec::with_capacity(rows);
                let mut scratch: Vec<usize> = Vec::with_capacity(n);
                for r in 0..rows {
                    let row = &t.data()[r * n..(r + 1) * n];
                    scratch.clear();
                    scratch.extend(0..n);
                    scratch.select_nth_unstable_by(k - 1, |&x, &y| rank_cmp(row, x, y));
                    let pick = scratch[k - 1];
                    picks.push(pick);
                    out.push(row[pick]);
                }
                return Ok((self.row_result(t, out)?, picks));
            }
            Op::TailMean(a, m) => {
                let t = self.val(*a);
                let (rows, n) = self.row_view(i, t)?;
                if *m == 0 || *m > n {
                    return Err(Error::IndexOutOfRange { index: *m, len: n });
                }
                let mut picks = Vec::with_capacity(rows * m);
                let mut out = Vec::with_capacity(rows);
                let mut scratch: Vec<usize> = Vec::with_capacity(n);
                for r in 0..rows {
                    let row = &t.data()[r * n..(r + 1) * n];
                    scratch.clear();
                    scratch.extend(0..n);
                    if *m < n {
                        scratch.select_nth_unstable_by(m - 1, |&x, &y| rank_cmp(row, x, y));
                    }
                    let tail = &mut scratch[..*m];
                    tail.sort_unstable();
                    out.push(tail.iter().map(|&j| row[j]).sum::<f64>() / *m as f64);
                    picks.extend_from_slice(tail);
                }
                return Ok((self.row_result(t, out)?, picks));
            }
            Op::L1Normalize(a, kappa) => {
                let t = self.val(*a);
                let (rows, n) = self.row_view(i, t)?;
                let mut data = Vec::with_capacity(t.numel());
                let mut degenerate = Vec::new();
                for r in 0..rows {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let norm: f64 = row.iter().map(|x| x.abs()).sum();
                    if norm < L1_DEGENERATE {
                        degenerate.push(r);
                        data.extend(std::iter::repeat_n(kappa / n as f64, n));
                    } else {
                        data.extend(row.iter().map(|x| kappa * x / norm));
                    }
                }
                return Ok((Tensor::new(t.shape().to_vec(), data)?, degenerate));
            }
        };
        Ok((out, Vec::new()))
    }

    fn row_view(&self, i: usize, t: &Tensor) -> Result<(usize, usize)> {
        match t.shape() {
            [n] if *n > 0 => Ok((1, *n)),
            [r, n] if *n > 0 => Ok((*r, *n)),
            s => Err(self.shape_err(i, format!("expected nonempty vector or matrix, got {s:?}"))),
        }
    }

    fn row_result(&self, t: &Tensor, out: Vec<f64>) -> Result<Tensor> {
        if t.rank() == 1 {
            Ok(Tensor::scalar(out[0]))
        } else {
            let r = out.len();
            Tensor::new(vec![r, 1], out)
        }
    }

    fn binary(&self, i: usize, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| self.shape_err(i, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        if tb.numel() == 1 && out == ta.shape() {
            let y = tb.data()[0];
            return Ok(ta.map(|x| f(x, y)));
        }
        if ta.numel() == 1 && out == tb.shape() {
            let x = ta.data()[0];
            return Ok(tb.map(|y| f(x, y)));
        }
        let ma = broadcast_index_map(ta.shape(), &out);
        let mb = broadcast_index_map(tb.shape(), &out);
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&ia, &ib)| f(ta.data()[ia], tb.data()[ib]))
            .collect();
        Tensor::new(out, data)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse accumulation from a scalar `output`; returns gradients for every
    /// input declared with `requires_grad`, keyed by input name.
    pub fn backward(&self, output: NodeId) -> Result<Tensors> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out_val = self.val(output);
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                numel: out_val.numel(),
            });
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::Const => false,
                op => op.inputs().iter().any(|j| needs[j.0]),
            };
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Input { .. } = self.nodes[i].op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &needs, &mut adj);
        }
        let mut grads = Tensors::new();
        for (name, id) in &self.inputs {
            if id.0 >= n || !needs[id.0] {
                continue;
            }
            let shape = self.val(*id).shape().to_vec();
            let data = adj[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            grads.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], needs: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref().unwrap();
        let mut send = |id: NodeId, delta: Vec<f64>| {
            if !needs[id.0] {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input { .. } | Op::Const | Op::Step(_) => {}
            Op::Add(a, b) => {
                if needs[a.0] {
                    send(*a, self.reduce_to(*a, out.shape(), g.to_vec()));
                }
                if needs[b.0] {
                    send(*b, self.reduce_to(*b, out.shape(), g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs[a.0] {
                    send(*a, self.reduce_to(*a, out.shape(), g.to_vec()));
                }
                if needs[b.0] {
                    send(*b, self.reduce_to(*b, out.shape(), g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.val(*a), self.val(*b));
                let shape = out.shape();
                let ma = self.expand_map(ta, shape);
                let mb = self.expand_map(tb, shape);
                let av = |k: usize| ta.data()[ma.as_ref().map_or(k, |m| m[k])];
                let bv = |k: usize| tb.data()[mb.as_ref().map_or(k, |m| m[k])];
                if needs[a.0] {
                    let d = (0..g.len())
                        .map(|k| if is_div { g[k] / bv(k) } else { g[k] * bv(k) })
                        .collect();
                    send(*a, self.reduce_to(*a, shape, d));
                }
                if needs[b.0] {
                    let d = (0..g.len())
                        .map(|k| {
                            if is_div {
                                let y = bv(k);
                                -g[k] * av(k) / (y * y)
                            } else {
                                g[k] * av(k)
                            }
                        })
                        .collect();
                    send(*b, self.reduce_to(*b, shape, d));
                }
            }
            Op::Neg(a) => send(*a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, k) => send(*a, g.iter().map(|x| k * x).collect()),
            Op::AddScalar(a, _) | Op::Reshape(a, _) => send(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if needs[a.0] {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &tb.data()[c * n..(c + 1) * n];
                            da[r * k + c] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if needs[b.0] {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let x = ta.data()[r * k + c];
                            for (d, gv) in db[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let row = g.len() / outer.max(1);
                let mut offset = 0;
                for p in parts {
                    let t = self.val(*p);
                    let chunk = t.numel() / outer.max(1);
                    if needs[p.0] {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        send(*p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        d[y * r + x] = g[x * c + y];
                    }
                }
                send(*a, d);
            }
            Op::Exp(a) => send(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Tanh(a) => send(
                *a,
                g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Abs(a) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter().zip(x.data()).map(|(g, &x)| g * sign(x)).collect(),
                );
            }
            Op::LeakyRelu(a, s) => {
                let x = self.val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                        .collect(),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.val(*a).numel()]),
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let t = self.val(*a);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut d = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        d[x * c + y] = if *axis == 0 { g[y] } else { g[x] };
                    }
                }
                send(*a, d);
            }
            Op::Select(a, idx) => {
                let mut d = vec![0.0; self.val(*a).numel()];
                d[*idx] = g[0];
                send(*a, d);
            }
            Op::SelectCols(a, cols) => {
                let t = self.val(*a);
                let (r, c) = t.dims2();
                let mut d = vec![0.0; t.numel()];
                for row in 0..r {
                    for (k, &j) in cols.iter().enumerate() {
                        d[row * c + j] += g[row * cols.len() + k];
                    }
                }
                send(*a, d);
            }
            Op::TileRows {
                input,
                block,
                times,
            } => {
                let t = self.val(*input);
                let width = block * t.shape()[1];
                let mut d = vec![0.0; t.numel()];
                for (bi, dst) in d.chunks_exact_mut(width.max(1)).enumerate() {
                    for rep in 0..*times {
                        let start = (bi * times + rep) * width;
                        for (x, y) in dst.iter_mut().zip(&g[start..start + width]) {
                            *x += y;
                        }
                    }
                }
                send(*input, d);
            }
            Op::OrderStat(a, _) => {
                let t = self.val(*a);
                let (_, n) = t.dims2();
                let mut d = vec![0.0; t.numel()];
                for (r, &pick) in node.saved.iter().enumerate() {
                    d[r * n + pick] = g[r];
                }
                send(*a, d);
            }
            Op::TailMean(a, m) => {
                let t = self.val(*a);
                let (_, n) = t.dims2();
                let mut d = vec![0.0; t.numel()];
                for (r, picks) in node.saved.chunks_exact(*m).enumerate() {
                    let share = g[r] / *m as f64;
                    for &j in picks {
                        d[r * n + j] = share;
                    }
                }
                send(*a, d);
            }
            Op::L1Normalize(a, kappa) => {
                let t = self.val(*a);
                let (rows, n) = t.dims2();
                let mut d = vec![0.0; t.numel()];
                let mut degenerate = node.saved.iter().peekable();
                for r in 0..rows {
                    if degenerate.peek() == Some(&&r) {
                        degenerate.next();
                        continue;
                    }
                    let h = &t.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm: f64 = h.iter().map(|x| x.abs()).sum();
                    let dot: f64 = gr.iter().zip(h).map(|(g, h)| g * h).sum();
                    for j in 0..n {
                        d[r * n + j] = kappa / norm * (gr[j] - sign(h[j]) * dot / norm);
                    }
                }
                send(*a, d);
            }
        }
    }

    /// Index map from the broadcast output shape into `t`, or `None` when no
    /// expansion happened.
    fn expand_map(&self, t: &Tensor, out: &[usize]) -> Option<Vec<usize>> {
        if t.shape() == out {
            None
        } else {
            Some(broadcast_index_map(t.shape(), out))
        }
    }

    fn reduce_to(&self, id: NodeId, out: &[usize], d: Vec<f64>) -> Vec<f64> {
        let t = self.val(id);
        if t.shape() == out {
            return d;
        }
        let map = broadcast_index_map(t.shape(), out);
        let mut r = vec![0.0; t.numel()];
        for (k, &j) in map.iter().enumerate() {
            r[j] += d[k];
        }
        r
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total order on positions of `row`: by value, then by position.
fn rank_cmp(row: &[f64], x: usize, y: usize) -> Ordering {
    row[x].total_cmp(&row[y]).then(x.cmp(&y))
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let x = a[r * k + c];
            for (o, y) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}
