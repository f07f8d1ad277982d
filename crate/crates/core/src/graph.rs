//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once by appending nodes, so every node's inputs
//! precede it and the insertion order is a topological order. Trainable
//! tensors live outside the graph in a parameter slice addressed by index;
//! several graphs (encoder, decoder, encoder+decoder) can therefore share
//! one parameter set.
//!
//! Evaluation produces a [`Trace`] holding every intermediate value.
//! [`Graph::backward`] consumes a trace and returns one gradient per
//! referenced parameter. Graphs are immutable after construction and can
//! be evaluated from several threads at once.
//!
//! Inputs are declared with a per-sample shape; the leading dimension of
//! the tensor fed at evaluation time is the batch size and may vary.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvDims {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    stride: (usize, usize),
    pad: (usize, usize),
    out_pad: (usize, usize),
    dims: ConvDims,
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
        sample_shape: Vec<usize>,
    },
    Param(usize),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n, m] * [n, 1]`, the column broadcast across each row.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[n, m] -> [n, 1]`
    RowSum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::RowSum(_) => "row_sum",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv { geom, .. } => match geom.dims {
                ConvDims::One => "conv1d",
                ConvDims::Two => "conv2d",
            },
            Op::ConvTranspose { geom, .. } => match geom.dims {
                ConvDims::One => "conv_transpose1d",
                ConvDims::Two => "conv_transpose2d",
            },
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::MulCol(a, b) | Op::Mse(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::RowSum(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::SoftmaxCrossEntropy { logits, targets } => vec![logits, targets],
        }
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Op>,
    needs_grad: Vec<bool>,
    outputs: Vec<(String, NodeId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Values of every node from one evaluation.
#[derive(Debug)]
pub struct Trace {
    graph_id: u64,
    values: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs = match &op {
            Op::Param(_) => true,
            Op::Input { .. } | Op::Const(_) => false,
            other => other.inputs().iter().any(|i| self.needs_grad[i.0]),
        };
        self.nodes.push(op);
        self.needs_grad.push(needs);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, sample_shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string(), sample_shape: sample_shape.to_vec() })
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Op::Param(index))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    /// `x: [n, c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let geom = ConvGeom { stride: (1, stride), pad: (0, pad), out_pad: (0, 0), dims: ConvDims::One };
        self.push(Op::Conv { x, w, b, geom })
    }

    /// `x: [n, c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> NodeId {
        let geom = ConvGeom { stride, pad, out_pad: (0, 0), dims: ConvDims::Two };
        self.push(Op::Conv { x, w, b, geom })
    }

    /// `x: [n, c_in, len]`, `w: [c_in, c_out, k]`, `b: [c_out]`.
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let geom = ConvGeom { stride: (1, stride), pad: (0, pad), out_pad: (0, out_pad), dims: ConvDims::One };
        self.push(Op::ConvTranspose { x, w, b, geom })
    }

    /// `x: [n, c_in, h, w]`, `w: [c_in, c_out, kh, kw]`, `b: [c_out]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> NodeId {
        let geom = ConvGeom { stride, pad, out_pad, dims: ConvDims::Two };
        self.push(Op::ConvTranspose { x, w, b, geom })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse(a, b))
    }

    /// Mean over rows of `-Σ_c t_c log softmax(z)_c`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    pub fn set_output(&mut self, name: &str, node: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), node));
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Indices of the parameters this graph reads.
    pub fn param_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param(i) => Some(*i),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Output shape of every node for the given input shapes (batch
    /// dimension included), without evaluating anything.
    pub fn infer_shapes(&self, params: &[Vec<usize>], inputs: &[(&str, &[usize])]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for op in &self.nodes {
            let s = match op {
                Op::Input { name, sample_shape } => {
                    let shape = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, s)| s.to_vec())
                        .ok_or_else(|| Error::InvalidArgument(format!("missing input `{name}`")))?;
                    check_input_shape(name, sample_shape, &shape)?;
                    shape
                }
                Op::Param(i) => {
                    params.get(*i).cloned().ok_or_else(|| Error::InvalidArgument(format!("missing parameter {i}")))?
                }
                Op::Const(t) => t.shape().to_vec(),
                other => {
                    let ins: Vec<&[usize]> = other.inputs().iter().map(|i| shapes[i.0].as_slice()).collect();
                    op_shape(other, &ins)?
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    fn value<'a>(&'a self, trace: &'a Trace, params: &'a [Tensor], id: NodeId) -> &'a Tensor {
        match &self.nodes[id.0] {
            Op::Param(i) => &params[*i],
            Op::Const(t) => t,
            _ => trace.values[id.0].as_ref().expect("node evaluated"),
        }
    }

    pub fn forward(&self, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<Trace> {
        let mut trace = Trace { graph_id: self.id, values: Vec::with_capacity(self.nodes.len()) };
        for (idx, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Input { name, sample_shape } => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::InvalidArgument(format!("missing input `{name}`")))?;
                    check_input_shape(name, sample_shape, t.shape())?;
                    t.ensure_finite(&format!("input `{name}`"))?;
                    Some(t.clone())
                }
                Op::Param(i) => {
                    let p = params.get(*i).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {i}")))?;
                    p.ensure_finite(&format!("parameter {i}"))?;
                    None
                }
                Op::Const(_) => None,
                other => {
                    let ins: Vec<&Tensor> = other.inputs().iter().map(|&i| self.value(&trace, params, i)).collect();
                    let shapes: Vec<&[usize]> = ins.iter().map(|t| t.shape()).collect();
                    let out_shape = op_shape(other, &shapes)?;
                    let out = eval(other, &ins, &out_shape)?;
                    if !out.is_finite() {
                        return Err(Error::NonFinite(format!("node {idx} ({})", other.name())));
                    }
                    Some(out)
                }
            };
            trace.values.push(value);
        }
        Ok(trace)
    }

    /// Value of `node` in `trace`.
    pub fn get<'a>(&'a self, trace: &'a Trace, params: &'a [Tensor], node: NodeId) -> &'a Tensor {
        self.value(trace, params, node)
    }

    /// Value of the named output in `trace`.
    pub fn get_output<'a>(&'a self, trace: &'a Trace, params: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
        let id = self.output(name).ok_or_else(|| Error::InvalidArgument(format!("no output named `{name}`")))?;
        Ok(self.value(trace, params, id))
    }

    /// Gradients of the scalar `loss` with respect to every parameter the
    /// graph reads; entries for unreferenced parameter indices are `None`.
    pub fn backward(&self, trace: &Trace, params: &[Tensor], loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if trace.graph_id != self.id || trace.values.len() != self.nodes.len() {
            return Err(Error::TraceMismatch);
        }
        let loss_val = self.value(trace, params, loss);
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = &self.nodes[idx];
            if let Op::Param(i) = op {
                match &mut out[*i] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot => *slot = Some(g),
                }
                continue;
            }
            let in_ids = op.inputs();
            let wanted: Vec<bool> = in_ids.iter().map(|i| self.needs_grad[i.0]).collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let ins: Vec<&Tensor> = in_ids.iter().map(|&i| self.value(trace, params, i)).collect();
            let outv = self.value(trace, params, NodeId(idx));
            let in_grads = grad(op, &ins, outv, &g, &wanted)?;
            for ((id, w), ig) in in_ids.iter().zip(&wanted).zip(in_grads) {
                if !*w {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[id.0] {
                        Some(acc) => acc.axpy(1.0, &ig)?,
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        for g in out.iter().flatten() {
            g.ensure_finite("parameter gradient")?;
        }
        Ok(out)
    }
}

fn check_input_shape(name: &str, sample_shape: &[usize], shape: &[usize]) -> Result<()> {
    if shape.len() != sample_shape.len() + 1 || shape[1..] != *sample_shape || shape[0] == 0 {
        return Err(Error::Shape(format!("input `{name}` expects [batch, {sample_shape:?}], got {shape:?}")));
    }
    Ok(())
}

fn conv_out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

fn conv_t_out_len(n: usize, k: usize, s: usize, p: usize, op: usize) -> Option<usize> {
    ((n - 1) * s + k + op).checked_sub(2 * p).filter(|&v| v > 0)
}

/// Splits a conv operand shape into `(batch, channels, h, w)`.
fn conv_view(shape: &[usize], dims: ConvDims) -> Option<(usize, usize, usize, usize)> {
    match (dims, shape.len()) {
        (ConvDims::One, 3) => Some((shape[0], shape[1], 1, shape[2])),
        (ConvDims::Two, 4) => Some((shape[0], shape[1], shape[2], shape[3])),
        _ => None,
    }
}

fn op_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let mismatch = || Error::Shape(format!("{}: incompatible inputs {ins:?}", op.name()));
    let shape = match op {
        Op::MatMul(..) => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(mismatch());
            }
            vec![a[0], b[1]]
        }
        Op::Transpose(_) => {
            if ins[0].len() != 2 {
                return Err(mismatch());
            }
            vec![ins[0][1], ins[0][0]]
        }
        Op::Add(..) | Op::Mul(..) | Op::Mse(..) | Op::SoftmaxCrossEntropy { .. } => {
            if ins[0] != ins[1] {
                return Err(mismatch());
            }
            match op {
                Op::Mse(..) => vec![1],
                Op::SoftmaxCrossEntropy { .. } => {
                    if ins[0].len() != 2 {
                        return Err(mismatch());
                    }
                    vec![1]
                }
                _ => ins[0].to_vec(),
            }
        }
        Op::MulCol(..) => {
            let (a, c) = (ins[0], ins[1]);
            if a.len() != 2 || c != [a[0], 1] {
                return Err(mismatch());
            }
            a.to_vec()
        }
        Op::RowSum(_) => {
            if ins[0].len() != 2 {
                return Err(mismatch());
            }
            vec![ins[0][0], 1]
        }
        Op::Scale(..) | Op::Relu(_) | Op::Sigmoid(_) => ins[0].to_vec(),
        Op::Sum(_) | Op::Mean(_) => vec![1],
        Op::Conv { b, geom, .. } | Op::ConvTranspose { b, geom, .. } => {
            let transposed = matches!(op, Op::ConvTranspose { .. });
            let (n, ci, h, w) = conv_view(ins[0], geom.dims).ok_or_else(mismatch)?;
            let (wc0, wc1, kh, kw) = conv_view(ins[1], geom.dims).ok_or_else(mismatch)?;
            let (w_in, co) = if transposed { (wc0, wc1) } else { (wc1, wc0) };
            if w_in != ci {
                return Err(mismatch());
            }
            if b.is_some() && ins[2] != [co] {
                return Err(mismatch());
            }
            let (ho, wo) = if transposed {
                (
                    conv_t_out_len(h, kh, geom.stride.0, geom.pad.0, geom.out_pad.0),
                    conv_t_out_len(w, kw, geom.stride.1, geom.pad.1, geom.out_pad.1),
                )
            } else {
                (conv_out_len(h, kh, geom.stride.0, geom.pad.0), conv_out_len(w, kw, geom.stride.1, geom.pad.1))
            };
            let (ho, wo) = (ho.ok_or_else(mismatch)?, wo.ok_or_else(mismatch)?);
            match geom.dims {
                ConvDims::One => vec![n, co, wo],
                ConvDims::Two => vec![n, co, ho, wo],
            }
        }
        Op::Input { .. } | Op::Param(_) | Op::Const(_) => unreachable!("leaf nodes have no input shapes"),
    };
    Ok(shape)
}

fn zip_map(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(shape, data).expect("shape checked")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval(op: &Op, ins: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    let t = match op {
        Op::MatMul(..) => ins[0].matmul(ins[1])?,
        Op::Transpose(_) => ins[0].transpose2(),
        Op::Add(..) => zip_map(ins[0], ins[1], shape, |a, b| a + b),
        Op::Mul(..) => zip_map(ins[0], ins[1], shape, |a, b| a * b),
        Op::MulCol(..) => {
            let m = shape[1];
            let col = ins[1].data();
            let data = ins[0].data().iter().enumerate().map(|(k, &v)| v * col[k / m]).collect();
            Tensor::new(shape, data)?
        }
        Op::Scale(_, c) => ins[0].scale(*c),
        Op::RowSum(_) => {
            let m = ins[0].shape()[1];
            let data = ins[0].data().chunks(m).map(|r| r.iter().sum()).collect();
            Tensor::new(shape, data)?
        }
        Op::Relu(_) => ins[0].map(|v| v.max(0.0)),
        Op::Sigmoid(_) => ins[0].map(sigmoid),
        Op::Sum(_) => Tensor::scalar(ins[0].sum()),
        Op::Mean(_) => Tensor::scalar(ins[0].sum() / ins[0].numel() as f64),
        Op::Mse(..) => Tensor::scalar(crate::tensor::mse(ins[0], ins[1])?),
        Op::SoftmaxCrossEntropy { .. } => {
            let (z, t) = (ins[0], ins[1]);
            let c = z.shape()[1];
            let n = z.shape()[0];
            let mut total = 0.0;
            for (zr, tr) in z.data().chunks(c).zip(t.data().chunks(c)) {
                let lse = log_sum_exp(zr);
                total -= zr.iter().zip(tr).map(|(&zv, &tv)| tv * (zv - lse)).sum::<f64>();
            }
            Tensor::scalar(total / n as f64)
        }
        Op::Conv { b, geom, .. } => {
            let (n, ci, h, w) = conv_view(ins[0].shape(), geom.dims).expect("checked");
            let (co, _, kh, kw) = conv_view(ins[1].shape(), geom.dims).expect("checked");
            let (ho, wo) = out_hw(shape, geom.dims);
            let bias = b.map(|_| ins[2].data());
            let dims = ConvShape { n, ci, co, h, w, kh, kw, ho, wo };
            Tensor::new(shape, conv_forward(ins[0].data(), ins[1].data(), bias, &dims, geom))?
        }
        Op::ConvTranspose { b, geom, .. } => {
            let (n, ci, h, w) = conv_view(ins[0].shape(), geom.dims).expect("checked");
            let (_, co, kh, kw) = conv_view(ins[1].shape(), geom.dims).expect("checked");
            let (ho, wo) = out_hw(shape, geom.dims);
            let bias = b.map(|_| ins[2].data());
            let dims = ConvShape { n, ci, co, h, w, kh, kw, ho, wo };
            Tensor::new(shape, conv_t_forward(ins[0].data(), ins[1].data(), bias, &dims, geom))?
        }
        Op::Input { .. } | Op::Param(_) | Op::Const(_) => unreachable!("leaf nodes are not evaluated"),
    };
    Ok(t)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn out_hw(shape: &[usize], dims: ConvDims) -> (usize, usize) {
    match dims {
        ConvDims::One => (1, shape[2]),
        ConvDims::Two => (shape[2], shape[3]),
    }
}

fn grad(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor, wanted: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| wanted[i];
    let res = match op {
        Op::MatMul(..) => {
            let (a, b) = (ins[0], ins[1]);
            let da = want(0).then(|| g.matmul(&b.transpose2())).transpose()?;
            let db = want(1).then(|| a.transpose2().matmul(g)).transpose()?;
            vec![da, db]
        }
        Op::Transpose(_) => vec![Some(g.transpose2())],
        Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul(..) => {
            let (a, b) = (ins[0], ins[1]);
            vec![
                want(0).then(|| zip_map(g, b, b.shape(), |x, y| x * y)),
                want(1).then(|| zip_map(g, a, a.shape(), |x, y| x * y)),
            ]
        }
        Op::MulCol(..) => {
            let (a, col) = (ins[0], ins[1]);
            let m = a.shape()[1];
            let da = want(0).then(|| {
                let c = col.data();
                let data = g.data().iter().enumerate().map(|(k, &v)| v * c[k / m]).collect();
                Tensor::new(a.shape(), data).expect("shape")
            });
            let dc = want(1).then(|| {
                let data = g
                    .data()
                    .chunks(m)
                    .zip(a.data().chunks(m))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                Tensor::new(col.shape(), data).expect("shape")
            });
            vec![da, dc]
        }
        Op::Scale(_, c) => vec![Some(g.scale(*c))],
        Op::RowSum(_) => {
            let m = ins[0].shape()[1];
            let gd = g.data();
            let data = (0..ins[0].numel()).map(|k| gd[k / m]).collect();
            vec![Some(Tensor::new(ins[0].shape(), data)?)]
        }
        Op::Relu(_) => vec![Some(zip_map(g, ins[0], ins[0].shape(), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Sigmoid(_) => vec![Some(zip_map(g, out, out.shape(), |gv, y| gv * y * (1.0 - y)))],
        Op::Sum(_) => vec![Some(Tensor::full(ins[0].shape(), g.data()[0]))],
        Op::Mean(_) => vec![Some(Tensor::full(ins[0].shape(), g.data()[0] / ins[0].numel() as f64))],
        Op::Mse(..) => {
            let (a, b) = (ins[0], ins[1]);
            let k = 2.0 * g.data()[0] / a.numel() as f64;
            let da = zip_map(a, b, a.shape(), |x, y| k * (x - y));
            let db = want(1).then(|| da.scale(-1.0));
            vec![want(0).then_some(da), db]
        }
        Op::SoftmaxCrossEntropy { .. } => {
            let (z, t) = (ins[0], ins[1]);
            let (n, c) = (z.shape()[0], z.shape()[1]);
            let k = g.data()[0] / n as f64;
            let mut dz = vec![0.0; n * c];
            let mut dt = vec![0.0; n * c];
            for i in 0..n {
                let zr = &z.data()[i * c..(i + 1) * c];
                let tr = &t.data()[i * c..(i + 1) * c];
                let lse = log_sum_exp(zr);
                let tsum: f64 = tr.iter().sum();
                for j in 0..c {
                    let logp = zr[j] - lse;
                    dz[i * c + j] = k * (logp.exp() * tsum - tr[j]);
                    dt[i * c + j] = -k * logp;
                }
            }
            vec![
                want(0).then(|| Tensor::new(z.shape(), dz).expect("shape")),
                want(1).then(|| Tensor::new(t.shape(), dt).expect("shape")),
            ]
        }
        Op::Conv { b, geom, .. } | Op::ConvTranspose { b, geom, .. } => {
            let transposed = matches!(op, Op::ConvTranspose { .. });
            let (n, ci, h, w) = conv_view(ins[0].shape(), geom.dims).expect("checked");
            let (wc0, wc1, kh, kw) = conv_view(ins[1].shape(), geom.dims).expect("checked");
            let co = if transposed { wc1 } else { wc0 };
            let (ho, wo) = out_hw(out.shape(), geom.dims);
            let dims = ConvShape { n, ci, co, h, w, kh, kw, ho, wo };
            let (dx, dw) = if transposed {
                conv_t_backward(ins[0].data(), ins[1].data(), g.data(), &dims, geom, want(0), want(1))
            } else {
                conv_backward(ins[0].data(), ins[1].data(), g.data(), &dims, geom, want(0), want(1))
            };
            let mut v = vec![
                dx.map(|d| Tensor::new(ins[0].shape(), d).expect("shape")),
                dw.map(|d| Tensor::new(ins[1].shape(), d).expect("shape")),
            ];
            if b.is_some() {
                let db = want(2).then(|| {
                    let plane = ho * wo;
                    let mut db = vec![0.0; co];
                    for bi in 0..n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let s = (bi * co + o) * plane;
                            *acc += g.data()[s..s + plane].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&[co], db).expect("shape")
                });
                v.push(db);
            }
            v
        }
        Op::Input { .. } | Op::Param(_) | Op::Const(_) => unreachable!("leaf nodes have no inputs"),
    };
    Ok(res)
}

struct ConvShape {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

/// Indices `idx < count` for which `idx * stride + off - pad` lands in
/// `[0, target)`.
fn valid_range(count: usize, target: usize, stride: usize, off: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    if target + pad < off + 1 {
        return 0..0;
    }
    let hi = ((target - 1 + pad - off) / stride + 1).min(count);
    lo..hi.max(lo)
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, s: &ConvShape, geom: &ConvGeom) -> Vec<f64> {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let mut out = vec![0.0; s.n * s.co * plane_out];
    for b in 0..s.n {
        for o in 0..s.co {
            let ob = (b * s.co + o) * plane_out;
            let oplane = &mut out[ob..ob + plane_out];
            if let Some(bias) = bias {
                oplane.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..s.ci {
                let xplane = &x[(b * s.ci + c) * plane_in..(b * s.ci + c + 1) * plane_in];
                for ki in 0..s.kh {
                    let ri = valid_range(s.ho, s.h, sh, ki, ph);
                    for kj in 0..s.kw {
                        let wv = wt[((o * s.ci + c) * s.kh + ki) * s.kw + kj];
                        let rj = valid_range(s.wo, s.w, sw, kj, pw);
                        for oi in ri.clone() {
                            let ii = oi * sh + ki - ph;
                            let orow = &mut oplane[oi * s.wo..(oi + 1) * s.wo];
                            let xrow = &xplane[ii * s.w..(ii + 1) * s.w];
                            for oj in rj.clone() {
                                orow[oj] += wv * xrow[oj * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    s: &ConvShape,
    geom: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; wt.len()]);
    for b in 0..s.n {
        for o in 0..s.co {
            let gb = (b * s.co + o) * plane_out;
            let gplane = &g[gb..gb + plane_out];
            for c in 0..s.ci {
                let xb = (b * s.ci + c) * plane_in;
                for ki in 0..s.kh {
                    let ri = valid_range(s.ho, s.h, sh, ki, ph);
                    for kj in 0..s.kw {
                        let widx = ((o * s.ci + c) * s.kh + ki) * s.kw + kj;
                        let wv = wt[widx];
                        let rj = valid_range(s.wo, s.w, sw, kj, pw);
                        let mut acc = 0.0;
                        for oi in ri.clone() {
                            let ii = oi * sh + ki - ph;
                            let grow = &gplane[oi * s.wo..(oi + 1) * s.wo];
                            let xrow_start = xb + ii * s.w;
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[xrow_start..xrow_start + s.w];
                                for oj in rj.clone() {
                                    dxrow[oj * sw + kj - pw] += wv * grow[oj];
                                }
                            }
                            if want_w {
                                let xrow = &x[xrow_start..xrow_start + s.w];
                                for oj in rj.clone() {
                                    acc += grow[oj] * xrow[oj * sw + kj - pw];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn conv_t_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, s: &ConvShape, geom: &ConvGeom) -> Vec<f64> {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let mut out = vec![0.0; s.n * s.co * plane_out];
    for b in 0..s.n {
        for o in 0..s.co {
            let ob = (b * s.co + o) * plane_out;
            let oplane = &mut out[ob..ob + plane_out];
            if let Some(bias) = bias {
                oplane.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..s.ci {
                let xplane = &x[(b * s.ci + c) * plane_in..(b * s.ci + c + 1) * plane_in];
                for ki in 0..s.kh {
                    let ri = valid_range(s.h, s.ho, sh, ki, ph);
                    for kj in 0..s.kw {
                        let wv = wt[((c * s.co + o) * s.kh + ki) * s.kw + kj];
                        let rj = valid_range(s.w, s.wo, sw, kj, pw);
                        for ii in ri.clone() {
                            let oi = ii * sh + ki - ph;
                            let orow = &mut oplane[oi * s.wo..(oi + 1) * s.wo];
                            let xrow = &xplane[ii * s.w..(ii + 1) * s.w];
                            for jj in rj.clone() {
                                orow[jj * sw + kj - pw] += wv * xrow[jj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_t_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    s: &ConvShape,
    geom: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let plane_in = s.h * s.w;
    let plane_out = s.ho * s.wo;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; wt.len()]);
    for b in 0..s.n {
        for o in 0..s.co {
            let gb = (b * s.co + o) * plane_out;
            let gplane = &g[gb..gb + plane_out];
            for c in 0..s.ci {
                let xb = (b * s.ci + c) * plane_in;
                for ki in 0..s.kh {
                    let ri = valid_range(s.h, s.ho, sh, ki, ph);
                    for kj in 0..s.kw {
                        let widx = ((c * s.co + o) * s.kh + ki) * s.kw + kj;
                        let wv = wt[widx];
                        let rj = valid_range(s.w, s.wo, sw, kj, pw);
                        let mut acc = 0.0;
                        for ii in ri.clone() {
                            let oi = ii * sh + ki - ph;
                            let grow = &gplane[oi * s.wo..(oi + 1) * s.wo];
                            let xrow_start = xb + ii * s.w;
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[xrow_start..xrow_start + s.w];
                                for jj in rj.clone() {
                                    dxrow[jj] += wv * grow[jj * sw + kj - pw];
                                }
                            }
                            if want_w {
                                let xrow = &x[xrow_start..xrow_start + s.w];
                                for jj in rj.clone() {
                                    acc += xrow[jj] * grow[jj * sw + kj - pw];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
