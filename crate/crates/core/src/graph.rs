//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! [`Graph::backward`] replays the tape in reverse and leaves gradients on
//! every leaf created with `requires_grad`. One graph supports exactly one
//! backward pass; build a new graph for the next forward.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Loss primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    BceWithLogits,
}

/// Forward primitives addressable by value, for table-driven callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Upsample2xNearest,
    AddBias,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Reshape,
    MeanPool2d,
    Concat { axis: usize },
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Upsample2x { input: Var, planes: usize, h: usize, w: usize },
    AddBias { input: Var, bias: Var, channels: usize, inner: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    MeanPool2d { input: Var, area: usize },
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T>, scale: T },
    BceLogits { logits: Var, targets: Vec<T>, scale: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf, if it requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Number of nodes currently holding a gradient.
    pub fn grad_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, site: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                site: site.to_string(),
            });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::AddBias { input, bias, .. } => vec![*input, *bias],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Upsample2x { input, .. } | Op::MeanPool2d { input, .. } => vec![*input],
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::SoftmaxCe { logits, .. } | Op::BceLogits { logits, .. } => vec![*logits],
        }
    }

    /// Dispatches a primitive by value.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var], reshape_to: Option<&[usize]>) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{prim:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Conv2d { stride, pad } => {
                arity(2)?;
                self.conv2d(inputs[0], inputs[1], stride, pad)
            }
            Primitive::Upsample2xNearest => {
                arity(1)?;
                self.upsample2x(inputs[0])
            }
            Primitive::AddBias => {
                arity(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            Primitive::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            Primitive::LeakyRelu(slope) => {
                arity(1)?;
                self.leaky_relu(inputs[0], slope)
            }
            Primitive::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            Primitive::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Reshape => {
                arity(1)?;
                let dims = reshape_to
                    .ok_or_else(|| Error::Contract("reshape needs target dims".into()))?;
                self.reshape(inputs[0], dims)
            }
            Primitive::MeanPool2d => {
                arity(1)?;
                self.mean_pool2d(inputs[0])
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape("matmul", format!("{da:?} x {db:?}")));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// NCHW input, OIHW weight, square stride, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (di, dw) = (self.dims(input).to_vec(), self.dims(weight).to_vec());
        if di.len() != 4 || dw.len() != 4 || di[1] != dw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {di:?}, weight {dw:?}, stride {stride}"),
            ));
        }
        if di[2] + 2 * pad < dw[2] || di[3] + 2 * pad < dw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {dw:?} larger than padded input {di:?} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            batch: di[0],
            in_ch: di[1],
            in_h: di[2],
            in_w: di[3],
            out_ch: dw[0],
            k_h: dw[2],
            k_w: dw[3],
            stride,
            pad,
        };
        let out = kernels::conv2d(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)?;
        self.push(value, Op::Conv2d { input, weight, geom }, "conv2d")
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("upsample2x_nearest", format!("expected NCHW, got {d:?}")));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let out = kernels::upsample2x(self.value(input).data(), planes, h, w);
        let value = Tensor::new(vec![d[0], d[1], 2 * h, 2 * w], out)?;
        self.push(value, Op::Upsample2x { input, planes, h, w }, "upsample2x_nearest")
    }

    /// Adds a per-feature bias: `[N, F] + [F]` or `[N, C, H, W] + [C]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (di, db) = (self.dims(input).to_vec(), self.dims(bias).to_vec());
        let ok = db.len() == 1 && di.len() >= 2 && di[1] == db[0];
        if !ok {
            return Err(Error::shape("add_bias", format!("input {di:?}, bias {db:?}")));
        }
        let channels = di[1];
        let inner: usize = di[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        let value = Tensor::new(di, data)?;
        self.push(value, Op::AddBias { input, bias, channels, inner }, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu(x, s), "leaky_relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(dims)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Global spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn mean_pool2d(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("mean_pool2d", format!("expected NCHW, got {d:?}")));
        }
        let area = d[2] * d[3];
        let inv = T::one() / T::lit(area as f64);
        let data = self
            .value(input)
            .data()
            .chunks(area)
            .map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let value = Tensor::new(vec![d[0], d[1]], data)?;
        self.push(value, Op::MeanPool2d { input, area }, "mean_pool2d")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.dims(v).to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for dims {first:?}")));
        }
        let mut axis_len = 0;
        for &v in inputs {
            let d = self.dims(v);
            let compatible = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {d:?} on axis {axis}")));
            }
            axis_len += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.dims(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut dims = first;
        dims[axis] = axis_len;
        let value = Tensor::new(dims, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            "concat",
        )
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let value = self.zip_with(a, b, |p, q| p + q)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let value = self.zip_with(a, b, |p, q| p - q)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let value = self.zip_with(a, b, |p, q| p * q)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Cross-entropy of softmax(logits) against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let d = self.dims(logits).to_vec();
        if d.len() != 2 || d[0] != targets.len() || d[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {d:?} with {} targets", targets.len()),
            ));
        }
        let (n, k) = (d[0], d[1]);
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(Error::Validation(format!(
                "label {t} at index {i} out of range [0, {k})"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &t) in z.chunks(k).zip(targets) {
            let (lse, p) = log_softmax_row(row);
            total = total + (lse - row[t]);
            probs.extend(p);
        }
        let scale = match reduction {
            Reduction::Mean => T::one() / T::lit(n as f64),
            Reduction::Sum => T::one(),
        };
        let value = Tensor::scalar(total * scale);
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            "softmax_cross_entropy",
        )
    }

    /// Binary cross-entropy of sigmoid(logits) against targets in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], reduction: Reduction) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() || n == 0 {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} logits with {} targets", self.dims(logits), targets.len()),
            ));
        }
        if let Some((i, t)) = targets
            .iter()
            .enumerate()
            .find(|(_, &t)| t != T::zero() && t != T::one())
        {
            return Err(Error::Validation(format!("bce target {t} at index {i} not in {{0, 1}}")));
        }
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .fold(T::zero(), |acc, (&s, &t)| acc + bce_term(s, t));
        let scale = match reduction {
            Reduction::Mean => T::one() / T::lit(n as f64),
            Reduction::Sum => T::one(),
        };
        self.push(
            Tensor::scalar(total * scale),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                scale,
            },
            "bce_with_logits",
        )
    }

    pub fn loss(&mut self, kind: LossKind, logits: Var, targets: &[usize]) -> Result<Var> {
        match kind {
            LossKind::SoftmaxCrossEntropy => self.softmax_cross_entropy(logits, targets, Reduction::Mean),
            LossKind::BceWithLogits => {
                let t: Vec<T> = targets
                    .iter()
                    .map(|&t| match t {
                        0 => Ok(T::zero()),
                        1 => Ok(T::one()),
                        other => Err(Error::Validation(format!("bce target {other} not in {{0, 1}}"))),
                    })
                    .collect::<Result<_>>()?;
                self.bce_with_logits(logits, &t, Reduction::Mean)
            }
        }
    }

    /// Populates gradients of the scalar `loss` on all `requires_grad` leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let dims = self.nodes[i].value.dims().to_vec();
                self.nodes[i].grad = Some(Tensor::new(dims, g)?);
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !contrib.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        site: format!("backward of node {i}"),
                    });
                }
                accumulate(&mut grads[input.0], contrib);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input needing a gradient.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (da, db) = kernels::matmul_backward(
                    self.value(a).data(),
                    self.value(b).data(),
                    g,
                    m,
                    k,
                    n,
                    self.needs(a),
                    self.needs(b),
                );
                out.extend(da.map(|d| (a, d)));
                out.extend(db.map(|d| (b, d)));
            }
            &Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    &geom,
                    self.needs(input),
                    self.needs(weight),
                );
                out.extend(dx.map(|d| (input, d)));
                out.extend(dw.map(|d| (weight, d)));
            }
            &Op::Upsample2x { input, planes, h, w } => {
                out.push((input, kernels::upsample2x_backward(g, planes, h, w)));
            }
            &Op::AddBias { input, bias, channels, inner } => {
                if self.needs(input) {
                    out.push((input, g.to_vec()));
                }
                if self.needs(bias) {
                    let mut db = vec![T::zero(); channels];
                    for (j, &gv) in g.iter().enumerate() {
                        let c = (j / inner) % channels;
                        db[c] = db[c] + gv;
                    }
                    out.push((bias, db));
                }
            }
            &Op::Relu(x) => {
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((x, d));
            }
            &Op::LeakyRelu(x, s) => {
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                    .collect();
                out.push((x, d));
            }
            &Op::Tanh(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                out.push((x, d));
            }
            &Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                out.push((x, d));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::MeanPool2d { input, area } => {
                let inv = T::one() / T::lit(area as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(area))
                    .collect();
                out.push((input, d));
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + c]);
                        }
                        out.push((v, d));
                    }
                    offset += c;
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b).data()).map(|(&gv, &q)| gv * q).collect();
                    out.push((a, d));
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a).data()).map(|(&gv, &p)| gv * p).collect();
                    out.push((b, d));
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|&v| v * c).collect())),
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::SoftmaxCe { logits, targets, probs, scale } => {
                let k = probs.len() / targets.len();
                let coef = g[0] * *scale;
                let mut d: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] = d[row * k + t] - coef;
                }
                out.push((*logits, d));
            }
            Op::BceLogits { logits, targets, scale } => {
                let coef = g[0] * *scale;
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&s, &t)| (sigmoid(s) - t) * coef)
                    .collect();
                out.push((*logits, d));
            }
        }
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(s, 0) - s*t + ln(1 + e^{-|s|})`.
pub(crate) fn bce_term<T: Real>(s: T, t: T) -> T {
    s.max(T::zero()) - s * t + (-s.abs()).exp().ln_1p()
}

/// Returns (log-sum-exp, softmax) of one row.
pub(crate) fn log_softmax_row<T: Real>(row: &[T]) -> (T, Vec<T>) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let lse = m + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax of `[N, K]` logits, outside any graph.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let d = logits.dims();
    if d.len() != 2 {
        return Err(Error::shape("softmax", format!("expected [N, K], got {d:?}")));
    }
    let k = d[1];
    let data = logits
        .data()
        .chunks(k)
        .flat_map(|row| log_softmax_row(row).1)
        .collect();
    Tensor::new(d.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn relu_and_tanh_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(th).data(), &[0.0]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.concat(&[a, c], 0), Err(Error::Shape { op: "concat", .. })));
        assert!(g.concat(&[a, c], 1).is_ok());
    }

    #[test]
    fn loss_reference_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.softmax_cross_entropy(z, &[2], Reduction::Mean).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let s = g.constant(t(&[1], &[0.0]));
        let l = g.bce_with_logits(s, &[1.0], Reduction::Mean).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let z = g.constant(t(&[1, 3], &[10.0, 0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0], Reduction::Mean).unwrap();
        // -ln(e^10 / (e^10 + 2)) evaluated directly
        let direct = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((g.value(l).item().unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_label_is_a_validation_error() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.softmax_cross_entropy(z, &[0, 3], Reduction::Mean).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let s = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            g.bce_with_logits(s, &[0.5], Reduction::Mean),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let vals = [1., -2., 3., 0.5];
        let x = g.param(t(&[4], &vals));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        let l = g.scale(m, 0.5).unwrap();
        g.backward(l).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| v / 4.0).collect();
        assert_eq!(g.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn leaves_without_requires_grad_stay_untouched() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3., 4.]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[f64::MAX]));
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = t(&[2, 3], &[1000.0, -5.0, 3.0, 0.1, 0.2, 0.3]);
        let p = softmax(&z).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
