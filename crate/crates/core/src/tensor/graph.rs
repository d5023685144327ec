//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so backward is a single reverse sweep. A graph is built per step
//! and dropped afterwards.

use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a custom backward rule sees.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad_output: &'a Tensor,
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor>;
type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> Vec<Tensor>;

/// An op whose gradient is supplied verbatim instead of derived from its
/// forward computation. This is how straight-through estimators and
/// detached statistics are expressed.
pub struct CustomOp {
    name: String,
    arity: usize,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl CustomOp {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomOp")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .finish()
    }
}

/// Declares an op with `arity` differentiable inputs. The backward rule must
/// return exactly one gradient per input, each shaped like that input;
/// violations surface as errors from [`Graph::apply`] / [`Graph::backward`].
pub fn register_custom_backward<F, B>(
    name: impl Into<String>,
    arity: usize,
    forward: F,
    backward: B,
) -> Result<Rc<CustomOp>>
where
    F: Fn(&[&Tensor]) -> Result<Tensor> + 'static,
    B: Fn(&BackwardCtx<'_>) -> Vec<Tensor> + 'static,
{
    let name = name.into();
    if arity == 0 {
        return Err(Error::Arity {
            op: name,
            expected: 1,
            got: 0,
        });
    }
    Ok(Rc::new(CustomOp {
        name,
        arity,
        forward: Box::new(forward),
        backward: Box::new(backward),
    }))
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
    },
    ScalarMul {
        x: NodeId,
        s: NodeId,
    },
    Sum(NodeId),
    MeanSquare(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Powf {
        x: NodeId,
        p: f64,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    ChannelAffine {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Custom {
        op: Rc<CustomOp>,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-channel batch statistics produced by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over N·H·W.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.with_data(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
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

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, false, Op::Leaf)
    }

    /// Stop-gradient copy of `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push_raw(value, requires_grad, op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = av.dims2("matmul")?;
        let [k2, n] = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMul(a, b),
        ))
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[C'×C×k×k]`, no bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = xv.dims4("conv2d")?;
        let [oc, ic, kh, kw] = wv.dims4("conv2d")?;
        if ic != c {
            return Err(Error::DimensionMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("non-square kernel {kh}×{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let k = kh;
        let extent = |len: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} does not fit padded extent {padded}"),
                ));
            }
            if (padded - k) % stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integral output extent ({padded} - {k}) / {stride} + 1"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let (oh, ow) = (extent(h)?, extent(wd)?);
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            oc,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(xv.data(), wv.data(), &geom);
        Ok(self.push(
            Tensor::from_parts(vec![n, oc, oh, ow], out),
            &[x, w],
            Op::Conv2d { x, w, geom },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(v, &[x], Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    /// `x` times the single element of `s`.
    pub fn scalar_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape(
                "scalar_mul",
                format!("scalar expected, got {:?}", sv.shape()),
            ));
        }
        let c = sv.item();
        let v = self.value(x).map(|t| t * c);
        Ok(self.push(v, &[x, s], Op::ScalarMul { x, s }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, &[x], Op::Sum(x))
    }

    /// Uncentered second moment `(1/len) Σ xᵢ²` as a scalar node.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean_square());
        self.push(v, &[x], Op::MeanSquare(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(v, &[x], Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, &[x], Op::Tanh(x))
    }

    /// Elementwise power. Inputs must be positive when `p` is non-integral.
    pub fn powf(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if p.fract() != 0.0 && xv.data().iter().any(|&t| t <= 0.0) {
            return Err(Error::domain(
                "powf",
                format!("non-positive base with exponent {p}"),
            ));
        }
        let v = xv.map(|t| t.powf(p));
        Ok(self.push(v, &[x], Op::Powf { x, p }))
    }

    fn pool_dims(&self, op: &'static str, x: NodeId, k: usize) -> Result<[usize; 4]> {
        let [n, c, h, w] = self.value(x).dims4(op)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                op,
                format!("window {k} does not tile {h}×{w}"),
            ));
        }
        Ok([n, c, h, w])
    }

    /// Mean over non-overlapping `k×k` windows.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.pool_dims("avg_pool", x, k)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), n, c, h, w, k);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / k, w / k], out),
            &[x],
            Op::AvgPool { x, k },
        ))
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.pool_dims("max_pool", x, k)?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n, c, h, w, k);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / k, w / k], out),
            &[x],
            Op::MaxPool { x, argmax },
        ))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, c], data),
            &[x],
            Op::GlobalAvgPool(x),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, &[x], Op::Reshape(x)))
    }

    fn channel_layout(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(Error::shape(op, format!("need N×C×…, got {shape:?}")));
        }
        Ok((shape[0], shape[1], shape[2..].iter().product()))
    }

    fn check_channel_vec(&self, op: &'static str, v: NodeId, c: usize) -> Result<()> {
        let shape = self.value(v).shape();
        if shape != [c] {
            return Err(Error::DimensionMismatch {
                op,
                lhs: vec![c],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// `x · scale[c] + shift[c]` broadcast along axis 1.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (n, c, s) = self.channel_layout("channel_affine", x)?;
        self.check_channel_vec("channel_affine", scale, c)?;
        self.check_channel_vec("channel_affine", shift, c)?;
        let (a, b) = (self.value(scale).data(), self.value(shift).data());
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for v in &mut out[base..base + s] {
                    *v = *v * a[ch] + b[ch];
                }
            }
        }
        let out = xv.with_data(out);
        Ok(self.push(
            out,
            &[x, scale, shift],
            Op::ChannelAffine { x, scale, shift },
        ))
    }

    /// Training-mode batch normalization over N and the spatial axes, with
    /// the exact batch gradient in backward. Returns the batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c, s) = self.channel_layout("batch_norm", x)?;
        self.check_channel_vec("batch_norm", gamma, c)?;
        self.check_channel_vec("batch_norm", beta, c)?;
        if n < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training-mode batch needs at least 2 samples, got {n}"),
            ));
        }
        let count = n * s;
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                mean[ch] += xv[base..base + s].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                var[ch] += xv[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let out = self.value(x).with_data(out);
        let id = self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((id, BatchStats { mean, var, count }))
    }

    /// Mean softmax cross entropy of `logits[N×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let [n, k] = self.value(logits).dims2("cross_entropy")?;
        if k < 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("need at least 2 classes, got {k}"),
            ));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy",
                lhs: vec![n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {bad} out of range [0, {k})"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Applies a registered custom op.
    pub fn apply(&mut self, op: &Rc<CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity {
            return Err(Error::Arity {
                op: op.name.clone(),
                expected: op.arity,
                got: inputs.len(),
            });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = (op.forward)(&values)?;
        Ok(self.push(
            out,
            inputs,
            Op::Custom {
                op: Rc::clone(op),
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `root`; gradients are then available via
    /// [`grad`](Self::grad).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(self.value(root).with_data(vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                for (input, contrib) in self.node_backward(idx, &g)? {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let [m, k] = av.dims2("matmul")?;
                let n = bv.shape()[1];
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(a) {
                    let da = kernels::matmul_grad_lhs(gd, bv.data(), m, k, n);
                    v.push((a, av.with_data(da)));
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_grad_rhs(av.data(), gd, m, k, n);
                    v.push((b, bv.with_data(db)));
                }
                v
            }
            &Op::Conv2d { x, w, ref geom } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let need_dx = self.requires_grad(x);
                let (dx, dw) = kernels::conv2d_backward(xv.data(), wv.data(), gd, geom, need_dx);
                let mut v = vec![(w, wv.with_data(dw))];
                if let Some(dx) = dx {
                    v.push((x, xv.with_data(dx)));
                }
                v
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|t| -t))],
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                vec![
                    (a, zip_map(g, bv, |x, y| x * y)),
                    (b, zip_map(g, av, |x, y| x * y)),
                ]
            }
            &Op::Affine { x, scale } => vec![(x, g.map(|t| t * scale))],
            &Op::ScalarMul { x, s } => {
                let xv = self.value(x);
                let c = self.value(s).item();
                let ds: f64 = gd.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                vec![
                    (x, g.map(|t| t * c)),
                    (s, self.value(s).with_data(vec![ds])),
                ]
            }
            &Op::Sum(x) => {
                let xv = self.value(x);
                vec![(x, Tensor::full(xv.shape(), gd[0]))]
            }
            &Op::MeanSquare(x) => {
                let xv = self.value(x);
                let c = 2.0 * gd[0] / xv.numel() as f64;
                vec![(x, xv.map(|t| c * t))]
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                vec![(x, zip_map(g, xv, |gv, t| if t > 0.0 { gv } else { 0.0 }))]
            }
            &Op::Tanh(x) => {
                let y = &node.value;
                vec![(x, zip_map(g, y, |gv, t| gv * (1.0 - t * t)))]
            }
            &Op::Powf { x, p } => {
                let xv = self.value(x);
                vec![(x, zip_map(g, xv, |gv, t| gv * p * t.powf(p - 1.0)))]
            }
            &Op::AvgPool { x, k } => {
                let [n, c, h, w] = self.value(x).dims4("avg_pool")?;
                let dx = kernels::avg_pool_backward(gd, n, c, h, w, k);
                vec![(x, self.value(x).with_data(dx))]
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                vec![(*x, xv.with_data(dx))]
            }
            &Op::GlobalAvgPool(x) => {
                let xv = self.value(x);
                let [_, _, h, w] = xv.dims4("global_avg_pool")?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let dx = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(hw))
                    .collect();
                vec![(x, xv.with_data(dx))]
            }
            &Op::Reshape(x) => {
                let xv = self.value(x);
                vec![(x, xv.with_data(gd.to_vec()))]
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let (n, c, s) = self.channel_layout("channel_affine", x)?;
                let xv = self.value(x).data();
                let a = self.value(scale).data();
                let mut dx = vec![0.0; xv.len()];
                let mut da = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dx[j] = gd[j] * a[ch];
                            da[ch] += gd[j] * xv[j];
                            db[ch] += gd[j];
                        }
                    }
                }
                vec![
                    (x, self.value(x).with_data(dx)),
                    (scale, Tensor::from_parts(vec![c], da)),
                    (shift, Tensor::from_parts(vec![c], db)),
                ]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, s) = self.channel_layout("batch_norm", *x)?;
                let m = (n * s) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        let k = gam[ch] * inv_std[ch] / m;
                        for j in base..base + s {
                            dx[j] = k * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                        }
                    }
                }
                vec![
                    (*x, self.value(*x).with_data(dx)),
                    (*gamma, Tensor::from_parts(vec![c], dgamma)),
                    (*beta, Tensor::from_parts(vec![c], dbeta)),
                ]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let n = labels.len();
                let scale = gd[0] / n as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![(*logits, lv.with_data(d))]
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let ctx = BackwardCtx {
                    inputs: &values,
                    output: &node.value,
                    grad_output: g,
                };
                let grads = (op.backward)(&ctx);
                if grads.len() != inputs.len() {
                    return Err(Error::Arity {
                        op: op.name.clone(),
                        expected: inputs.len(),
                        got: grads.len(),
                    });
                }
                for (gi, vi) in grads.iter().zip(&values) {
                    if gi.shape() != vi.shape() {
                        return Err(Error::DimensionMismatch {
                            op: "custom backward",
                            lhs: vi.shape().to_vec(),
                            rhs: gi.shape().to_vec(),
                        });
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}
