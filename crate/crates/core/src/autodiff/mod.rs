//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every forward op as a node holding its output value.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! map with one entry per node that depends on a parameter.
//!
//! The op vocabulary is fixed: exactly what the encoder, decoder,
//! discriminator and the entropy/GAN losses need.
//!
//! Under [`Precision::F32`] every node value is rounded to the nearest `f32`
//! as it is stored, so activations and parameters live on the 32-bit grid
//! while reductions still accumulate in 64 bits.
//!
//! `stop_gradient` values can be recorded on one graph and replayed on
//! another. Replaying freezes the detached branches, which turns a
//! straight-through graph into an ordinary differentiable function of its
//! parameters; finite-difference checks rely on this.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{sum_slice, Tensor};
use kernels::ConvGeom;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn round(self, t: &mut Tensor) {
        if self == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Broadcast(NodeId),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(_) => "broadcast",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug)]
enum StopMode {
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, cursor: usize },
}

/// Recorded computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    stops: StopMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

/// Per-node gradients returned by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&k) if k > 0 => Ok((t.len() / k, k)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            stops: StopMode::Record(Vec::new()),
        }
    }

    /// A graph whose `stop_gradient` calls return `values` in call order
    /// instead of their live inputs.
    pub fn replaying(precision: Precision, values: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            stops: StopMode::Replay { values, cursor: 0 },
        }
    }

    /// Values produced by `stop_gradient` so far (record mode only).
    pub fn recorded_stops(&self) -> &[Tensor] {
        match &self.stops {
            StopMode::Record(v) => v,
            StopMode::Replay { .. } => &[],
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Shapes of every node recorded at or after `mark`.
    pub fn shapes_since(&self, mark: usize) -> impl Iterator<Item = &[usize]> {
        self.nodes[mark..].iter().map(|n| n.value.shape())
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        self.precision.round(&mut value);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(b))
            }
            Op::Concat(xs, _) => xs.iter().any(|&x| self.rg(x)),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice { x: a, .. }
            | Op::Broadcast(a) => self.rg(*a),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> NodeId {
        self.precision.round(&mut t);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
        });
        NodeId(id)
    }

    fn zip_map(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(op.name(), ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(op, out)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let out = self.val(a).map(f);
        self.push(op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    /// `(m,k) x (k,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n));
        self.push(Op::MatMul(a, b), out)
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || stride == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(mismatch());
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (w_in, cout) = if transpose {
            (ws[0], ws[1])
        } else {
            (ws[1], ws[0])
        };
        let (kh, kw) = (ws[2], ws[3]);
        if w_in != cin {
            return Err(mismatch());
        }
        let (ho, wo) = if transpose {
            let ho = ((h - 1) * stride + kh).checked_sub(2 * pad);
            let wo = ((wd - 1) * stride + kw).checked_sub(2 * pad);
            match (ho, wo) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(mismatch()),
            }
        } else {
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(mismatch());
            }
            ((h + 2 * pad - kh) / stride + 1, (wd + 2 * pad - kw) / stride + 1)
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Zero-padded cross-correlation; `x: (n,cin,h,w)`, `w: (cout,cin,kh,kw)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, pad, false)?;
        let data = kernels::conv2d(
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
            geom,
        );
        let out = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], data);
        self.push(Op::Conv2d { x, w, b, geom }, out)
    }

    /// Transposed convolution; `w: (cin,cout,kh,kw)`.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d_transpose", x, w, b, stride, pad, true)?;
        let data = kernels::conv2d_transpose(
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
            geom,
        );
        let out = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], data);
        self.push(Op::ConvTranspose2d { x, w, b, geom }, out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Op::LeakyRelu(a, slope), a, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.val(a).is_finite() {
            return Err(Error::NonFiniteInput("log"));
        }
        self.unary(Op::Log(a), a, f64::ln)
    }

    fn rowwise(
        &mut self,
        op: Op,
        a: NodeId,
        f: impl Fn(&[f64], &mut Vec<f64>),
    ) -> Result<NodeId> {
        let t = self.val(a);
        let name = op.name();
        if !t.is_finite() {
            return Err(Error::NonFiniteInput(name));
        }
        let (_, k) = last_axis(name, t)?;
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(k) {
            f(row, &mut data);
        }
        let shape = if matches!(op, Op::LogSumExp(_)) {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            t.shape().to_vec()
        };
        let out = Tensor::from_parts(shape, data);
        self.push(op, out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(Op::Softmax(a), a, |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - m).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(Op::LogSoftmax(a), a, |row, out| {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        })
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(Op::LogSumExp(a), a, |row, out| out.push(log_sum_exp(row)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = sum_slice(self.val(a).data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = sum_slice(t.data()) / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.val(a).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), out)
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.val(a);
        let mut seen = vec![false; perm.len()];
        let valid = perm.len() == t.shape().len()
            && perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: t.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), perm);
        self.push(Op::Permute(a, perm.to_vec()), Tensor::from_parts(shape, data))
    }

    /// Concatenate along `axis` (axis 1 is the channel axis of NCHW tensors).
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.val(x);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Op::Concat(xs.to_vec(), axis), Tensor::from_parts(shape, data))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: s.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, ax, inner) = kernels::split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * ax + start) * inner;
            data.extend_from_slice(&t.data()[off..off + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, data))
    }

    /// Right-aligned broadcast to `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.val(a);
        let s = t.shape();
        let lead = shape.len().checked_sub(s.len());
        let ok = lead.is_some_and(|lead| {
            s.iter()
                .enumerate()
                .all(|(d, &e)| e == 1 || e == shape[d + lead])
        });
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: s.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = kernels::broadcast_index_map(s, shape);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        self.push(Op::Broadcast(a), Tensor::from_parts(shape.to_vec(), data))
    }

    /// Identity on values, zero on gradients.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let value = match &mut self.stops {
            StopMode::Record(rec) => {
                let v = self.nodes[a.0].value.clone();
                rec.push(v.clone());
                v
            }
            StopMode::Replay { values, cursor } => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::invalid("stop_gradient replay exhausted"))?;
                *cursor += 1;
                same_shape("stop_gradient", &v, &self.nodes[a.0].value)?;
                v
            }
        };
        self.push(Op::StopGradient, value)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(NodeId(id), &node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.val(id);
        let gd = g.data();
        let mut acc = |target: NodeId, contrib: Vec<f64>| {
            if !self.rg(target) {
                return;
            }
            let slot = &mut grads[target.0];
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                None => {
                    *slot = Some(Tensor::from_parts(self.shape(target).to_vec(), contrib));
                }
            }
        };
        let zip = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            x.data()
                .iter()
                .zip(out.data())
                .zip(gd)
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect()
        };

        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ga, gb) = kernels::matmul_backward(ta.data(), tb.data(), gd, m, k, n);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.val(*x).data(), self.val(*w).data(), gd, *geom);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_transpose_backward(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    gd,
                    *geom,
                );
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Relu(a) => acc(*a, zip(self.val(*a), &|x, _, g| if x > 0.0 { g } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                acc(*a, zip(self.val(*a), &move |x, _, g| if x > 0.0 { g } else { s * g }))
            }
            Op::Tanh(a) => acc(*a, zip(self.val(*a), &|_, y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, zip(self.val(*a), &|_, y, g| g * y * (1.0 - y))),
            Op::Softplus(a) => acc(*a, zip(self.val(*a), &|x, _, g| g * sigmoid(x))),
            Op::Exp(a) => acc(*a, zip(self.val(*a), &|_, y, g| g * y)),
            Op::Log(a) => acc(*a, zip(self.val(*a), &|x, _, g| g / x)),
            Op::Softmax(a) => {
                let k = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(k).zip(gd.chunks(k)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let k = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(k).zip(gd.chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(y.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gs));
                }
                acc(*a, dx);
            }
            Op::LogSumExp(a) => {
                let x = self.val(*a);
                let k = *x.shape().last().unwrap();
                let mut dx = Vec::with_capacity(x.len());
                for ((row, &lse), &gv) in x.data().chunks(k).zip(out.data()).zip(gd) {
                    dx.extend(row.iter().map(|v| gv * (v - lse).exp()));
                }
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; self.val(*a).len()]),
            Op::Mean(a) => {
                let n = self.val(*a).len();
                acc(*a, vec![gd[0] / n as f64; n]);
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(gd, out.shape(), &inv);
                acc(*a, dx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    acc(x, dx);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, ax, inner) = kernels::split_axis(xs, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * ax + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Broadcast(a) => {
                let in_shape = self.shape(*a);
                let map = kernels::broadcast_index_map(in_shape, out.shape());
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (&src, &gv) in map.iter().zip(gd) {
                    dx[src] += gv;
                }
                acc(*a, dx);
            }
        }
    }
}
