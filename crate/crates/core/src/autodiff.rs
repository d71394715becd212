//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs were created earlier, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep. Gradients are only propagated into nodes that (transitively) depend
//! on a leaf created with `requires_grad`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv3dGeom};
use crate::lif::surrogate_scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse op identity, used by gradient checking and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Elementwise,
    Reduce,
    Shape,
    Conv3d,
    ConvTranspose3d,
    AvgPool3d,
    BatchNorm,
    Linear,
    LifMembrane,
    Spike,
    Bipolar,
    Loss,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { input: Var, axis: usize },
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Conv3d { input: Var, kernel: Var, bias: Option<Var>, geom: Conv3dGeom },
    ConvTranspose3d { input: Var, kernel: Var, bias: Option<Var>, geom: Conv3dGeom },
    AvgPool3d { input: Var, kernel: [usize; 3], stride: [usize; 3] },
    BatchNormTrain { input: Var, gamma: Var, shift: Var, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { input: Var, gamma: Var, shift: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    LifMembrane { mem: Var, spk: Var, current: Var, beta: Var, theta: Var },
    Spike { mem: Var, theta: Var, slope: f64 },
    Bipolar { input: Var },
    Mse(Var, Var),
    WeightedNll { logits: Var, probs: Tensor, targets: Vec<usize>, weights: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..)
            | Op::Sub(..)
            | Op::Mul(..)
            | Op::Scale(..)
            | Op::MulScalar(..)
            | Op::AddScalar(..)
            | Op::Sigmoid(_)
            | Op::Relu(_)
            | Op::Softplus(_) => OpKind::Elementwise,
            Op::Sum(_) | Op::Mean(_) | Op::MeanAxis { .. } => OpKind::Reduce,
            Op::Reshape(_) | Op::Slice { .. } | Op::Concat { .. } => OpKind::Shape,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::ConvTranspose3d { .. } => OpKind::ConvTranspose3d,
            Op::AvgPool3d { .. } => OpKind::AvgPool3d,
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Linear { .. } => OpKind::Linear,
            Op::LifMembrane { .. } => OpKind::LifMembrane,
            Op::Spike { .. } => OpKind::Spike,
            Op::Bipolar { .. } => OpKind::Bipolar,
            Op::Mse(..) | Op::WeightedNll { .. } => OpKind::Loss,
        }
    }
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// How the spike op evaluates its forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeForward {
    /// True Heaviside step; the surrogate only shapes the gradient.
    #[default]
    Heaviside,
    /// The smooth arctangent whose exact derivative is the surrogate. Only
    /// used to validate surrogate gradients against finite differences.
    Smooth,
}

/// Batch-norm result in train mode: output plus the batch moments used.
pub struct BatchNormOut {
    pub out: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    spike_forward: SpikeForward,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_spike_forward(mode: SpikeForward) -> Self {
        Self { spike_forward: mode, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn scalar_of(&self, v: Var, op: &'static str) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::dim(op, format!("expected a one-element tensor, got {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(y, op)?;
        x.zip_map(y, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, n, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, n, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, n, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let n = self.needs(&[a]);
        self.push(v, n, Op::Scale(a, c))
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "mul_scalar")?;
        let v = self.value(a).map(|x| x * c);
        let n = self.needs(&[a, s]);
        Ok(self.push(v, n, Op::MulScalar(a, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "add_scalar")?;
        let v = self.value(a).map(|x| x + c);
        let n = self.needs(&[a, s]);
        Ok(self.push(v, n, Op::AddScalar(a, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let n = self.needs(&[a]);
        self.push(v, n, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let n = self.needs(&[a]);
        self.push(v, n, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let n = self.needs(&[a]);
        self.push(v, n, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let n = self.needs(&[a]);
        self.push(v, n, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let n = self.needs(&[a]);
        self.push(v, n, Op::Mean(a))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("mean_axis", format!("axis {axis} on {:?}", t.shape())));
        }
        let s = t.shape();
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            dst.iter_mut().for_each(|x| *x /= len as f64);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        let n = self.needs(&[a]);
        Ok(self.push(v, n, Op::MeanAxis { input: a, axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let n = self.needs(&[a]);
        Ok(self.push(v, n, Op::Reshape(a)))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        let n = self.needs(&[a]);
        Ok(self.push(v, n, Op::Slice { input: a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let n = self.needs(parts);
        Ok(self.push(v, n, Op::Concat { inputs: parts.to_vec(), axis }))
    }

    fn conv_shapes(&self, input: Var, kernel: Var, op: &'static str) -> Result<([usize; 3], [usize; 3])> {
        let (x, k) = (self.value(input), self.value(kernel));
        if x.rank() != 5 || k.rank() != 5 {
            return Err(Error::dim(
                op,
                format!("input {:?} and kernel {:?} must both be rank 5", x.shape(), k.shape()),
            ));
        }
        let xs = x.shape();
        let ks = k.shape();
        Ok(([xs[2], xs[3], xs[4]], [ks[2], ks[3], ks[4]]))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = bias {
            if self.value(b).len() != channels {
                return Err(Error::dim(
                    op,
                    format!("bias {:?} does not match {channels} output channels", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// 3-D convolution. `input` is `[B, C, D1, D2, D3]`, `kernel` is
    /// `[Cout, C, k1, k2, k3]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: Conv3dGeom) -> Result<Var> {
        let (in_d, kd) = self.conv_shapes(input, kernel, "conv3d")?;
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs[1] != ks[1] {
            return Err(Error::dim(
                "conv3d",
                format!("input {xs:?} has {} channels but kernel {ks:?} expects {}", xs[1], ks[1]),
            ));
        }
        let c_out = ks[0];
        let out_d = geom.out_dims(in_d, kd).ok_or_else(|| {
            Error::dim("conv3d", format!("kernel {ks:?} does not fit input {xs:?} with {geom:?}"))
        })?;
        self.check_bias(bias, c_out, "conv3d")?;
        let mut v = kernels::conv3d_forward(self.value(input), self.value(kernel), &geom, out_d);
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut v, &self.value(b).data().to_vec());
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let n = self.needs(&deps);
        Ok(self.push(v, n, Op::Conv3d { input, kernel, bias, geom }))
    }

    /// Transposed 3-D convolution, the exact adjoint of [`Tape::conv3d`] with
    /// the same kernel and geometry. `input` is `[B, Cin, ...]`, `kernel` is
    /// `[Cin, Cout, k1, k2, k3]`.
    pub fn conv_transpose3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Conv3dGeom,
    ) -> Result<Var> {
        let (in_d, kd) = self.conv_shapes(input, kernel, "conv_transpose3d")?;
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs[1] != ks[0] {
            return Err(Error::dim(
                "conv_transpose3d",
                format!("input {xs:?} has {} channels but kernel {ks:?} expects {}", xs[1], ks[0]),
            ));
        }
        let c_out = ks[1];
        let out_d = geom.transposed_out_dims(in_d, kd).ok_or_else(|| {
            Error::dim("conv_transpose3d", format!("kernel {ks:?} and input {xs:?} give an empty output"))
        })?;
        // the forward conv must map out_d back onto in_d for the adjoint to be exact
        if geom.out_dims(out_d, kd) != Some(in_d) {
            return Err(Error::dim("conv_transpose3d", format!("geometry {geom:?} is not invertible for {xs:?}")));
        }
        self.check_bias(bias, c_out, "conv_transpose3d")?;
        let mut v = kernels::conv3d_backward_input(self.value(input), self.value(kernel), &geom, out_d);
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut v, &self.value(b).data().to_vec());
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let n = self.needs(&deps);
        Ok(self.push(v, n, Op::ConvTranspose3d { input, kernel, bias, geom }))
    }

    pub fn avg_pool3d(&mut self, input: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(5, "avg_pool3d")?;
        let s = x.shape();
        let in_d = [s[2], s[3], s[4]];
        let out_d = Conv3dGeom::new(stride, [0; 3]).out_dims(in_d, kernel).ok_or_else(|| {
            Error::dim("avg_pool3d", format!("kernel {kernel:?} larger than input dims {in_d:?}"))
        })?;
        let v = kernels::avg_pool3d_forward(x, kernel, stride, out_d);
        let n = self.needs(&[input]);
        Ok(self.push(v, n, Op::AvgPool3d { input, kernel, stride }))
    }

    fn check_bn(&self, input: Var, gamma: Var, shift: Var) -> Result<usize> {
        let s = self.shape(input);
        if s.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input {s:?} has no channel axis")));
        }
        let c = s[1];
        if self.value(gamma).len() != c || self.value(shift).len() != c {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?} / shift {:?}",
                    self.shape(gamma),
                    self.shape(shift)
                ),
            ));
        }
        Ok(c)
    }

    /// Batch normalization with batch statistics over every axis but 1.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, shift: Var, eps: f64) -> Result<BatchNormOut> {
        self.check_bn(input, gamma, shift)?;
        let x = self.value(input);
        let (mean, var) = kernels::channel_moments(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, v) = kernels::channel_normalize(x, &mean, &inv_std, self.value(gamma).data(), self.value(shift).data());
        let n = self.needs(&[input, gamma, shift]);
        let out = self.push(v, n, Op::BatchNormTrain { input, gamma, shift, xhat, inv_std });
        Ok(BatchNormOut { out, mean, var })
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_bn(input, gamma, shift)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics length differs from channels"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let scale: Vec<f64> = inv_std.iter().zip(g).map(|(a, b)| a * b).collect();
        let v = kernels::channel_affine(self.value(input), running_mean, &scale, self.value(shift).data());
        let n = self.needs(&[input, gamma, shift]);
        Ok(self.push(
            v,
            n,
            Op::BatchNormEval { input, gamma, shift, mean: running_mean.to_vec(), inv_std },
        ))
    }

    /// `input [B, d] · weightᵀ [d, out] + bias [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::dim(
                "linear",
                format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
            ));
        }
        self.check_bias(bias, w.shape()[0], "linear")?;
        let v = kernels::linear_forward(x, w, bias.map(|b| self.value(b)));
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let n = self.needs(&deps);
        Ok(self.push(v, n, Op::Linear { input, weight, bias }))
    }

    /// Membrane update `beta*mem + current - theta*spk` (soft reset).
    pub fn lif_membrane(&mut self, mem: Var, spk: Var, current: Var, beta: Var, theta: Var) -> Result<Var> {
        let b = self.scalar_of(beta, "lif_membrane")?;
        let th = self.scalar_of(theta, "lif_membrane")?;
        let (u, s, i) = (self.value(mem), self.value(spk), self.value(current));
        u.expect_same_shape(i, "lif_membrane")?;
        u.expect_same_shape(s, "lif_membrane")?;
        let data = membrane_update(u.data(), s.data(), i.data(), b, th);
        let v = Tensor::new(u.shape().to_vec(), data)?;
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite membrane potential".into()));
        }
        let n = self.needs(&[mem, spk, current, beta, theta]);
        Ok(self.push(v, n, Op::LifMembrane { mem, spk, current, beta, theta }))
    }

    /// Spike generation `Θ(mem - theta)` with strict inequality. The backward
    /// pass uses the arctangent surrogate with sharpness `slope`.
    pub fn spike(&mut self, mem: Var, theta: Var, slope: f64) -> Result<Var> {
        let th = self.scalar_of(theta, "spike")?;
        let v = match self.spike_forward {
            SpikeForward::Heaviside => self.value(mem).map(|u| heaviside(u - th)),
            SpikeForward::Smooth => self.value(mem).map(|u| smooth_step(u - th, slope)),
        };
        let n = self.needs(&[mem, theta]);
        Ok(self.push(v, n, Op::Spike { mem, theta, slope }))
    }

    /// Ternary threshold at `±tau` (strict). Straight-through gradient inside
    /// `[-1, 1]`, zero outside.
    pub fn bipolar(&mut self, input: Var, tau: f64) -> Var {
        let v = self.value(input).map(|x| bipolar_threshold(x, tau));
        let n = self.needs(&[input]);
        self.push(v, n, Op::Bipolar { input })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let v = Tensor::scalar(d.sum() / d.len() as f64);
        let n = self.needs(&[a, b]);
        Ok(self.push(v, n, Op::Mse(a, b)))
    }

    /// Batch mean of `-w_b * ln softmax(logits_b)[y_b]` for logits `[B, K]`.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.shape()[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::dim(
                "weighted_nll",
                format!("logits {:?} with {} targets / {} weights", l.shape(), targets.len(), weights.len()),
            ));
        }
        let (b, k) = (l.shape()[0], l.shape()[1]);
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("class {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for row in 0..b {
            let r = &l.data()[row * k..(row + 1) * k];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
            for (p, x) in probs[row * k..(row + 1) * k].iter_mut().zip(r) {
                *p = (x - m).exp() / z;
            }
            let log_p = r[targets[row]] - m - z.ln();
            total += -weights[row] * log_p;
        }
        let v = Tensor::scalar(total / b as f64);
        let probs = Tensor::new(vec![b, k], probs)?;
        let n = self.needs(&[logits]);
        Ok(self.push(
            v,
            n,
            Op::WeightedNll { logits, probs, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// Populates gradients of every node that depends on a grad-requiring
    /// leaf. `loss` must hold exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            self.grads[idx] = Some(g);
            for (var, t) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| x * c))),
            Op::MulScalar(a, s) => {
                let c = val(*s).data()[0];
                out.push((*a, g.map(|x| x * c)));
                if wants(*s) {
                    out.push((*s, Tensor::new(val(*s).shape().to_vec(), vec![g.dot(val(*a))?])?));
                }
            }
            Op::AddScalar(a, s) => {
                out.push((*a, g.clone()));
                if wants(*s) {
                    out.push((*s, Tensor::new(val(*s).shape().to_vec(), vec![g.sum()])?));
                }
            }
            Op::Sigmoid(a) => out.push((*a, g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y))?)),
            Op::Relu(a) => out.push((*a, g.zip_map(val(*a), |gy, x| if x > 0.0 { gy } else { 0.0 })?)),
            Op::Softplus(a) => out.push((*a, g.zip_map(val(*a), |gy, x| gy * sigmoid(x))?)),
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                out.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
            }
            Op::MeanAxis { input, axis } => {
                let s = val(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = v / len as f64;
                        }
                    }
                }
                out.push((*input, Tensor::new(s.to_vec(), gx)?));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape())?)),
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let len = g.shape()[*axis];
                let mut parts = Vec::new();
                if *start > 0 {
                    let mut zs = s.to_vec();
                    zs[*axis] = *start;
                    parts.push(Tensor::zeros(&zs));
                }
                parts.push(g.clone());
                let tail = s[*axis] - start - len;
                if tail > 0 {
                    let mut zs = s.to_vec();
                    zs[*axis] = tail;
                    parts.push(Tensor::zeros(&zs));
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                out.push((*input, Tensor::concat(&refs, *axis)?));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    out.push((*v, g.slice_axis(*axis, start, len)?));
                    start += len;
                }
            }
            Op::Conv3d { input, kernel, bias, geom } => {
                let (x, k) = (val(*input), val(*kernel));
                let xs = x.shape();
                if wants(*input) {
                    out.push((*input, kernels::conv3d_backward_input(g, k, geom, [xs[2], xs[3], xs[4]])));
                }
                if wants(*kernel) {
                    let ks = k.shape();
                    out.push((*kernel, kernels::conv3d_backward_kernel(g, x, geom, [ks[2], ks[3], ks[4]])));
                }
                if let Some(b) = bias {
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), kernels::channel_sums(g))?));
                }
            }
            Op::ConvTranspose3d { input, kernel, bias, geom } => {
                let (x, k) = (val(*input), val(*kernel));
                if wants(*input) {
                    let xs = x.shape();
                    out.push((*input, kernels::conv3d_forward(g, k, geom, [xs[2], xs[3], xs[4]])));
                }
                if wants(*kernel) {
                    let ks = k.shape();
                    out.push((*kernel, kernels::conv3d_backward_kernel(x, g, geom, [ks[2], ks[3], ks[4]])));
                }
                if let Some(b) = bias {
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), kernels::channel_sums(g))?));
                }
            }
            Op::AvgPool3d { input, kernel, stride } => {
                let s = val(*input).shape();
                out.push((*input, kernels::avg_pool3d_backward(g, *kernel, *stride, [s[2], s[3], s[4]])));
            }
            Op::BatchNormTrain { input, gamma, shift, xhat, inv_std } => {
                let gam = val(*gamma).data();
                let (gy_sum, gy_xhat_sum) = kernels::channel_dot_sums(g, xhat);
                if wants(*input) {
                    let s = g.shape();
                    let m = (g.len() / s[1]) as f64;
                    // dx = gamma*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gx = vec![0.0; g.len()];
                    for (slab, dst) in gx.chunks_mut(inner).enumerate() {
                        let ch = slab % c;
                        let k = gam[ch] * inv_std[ch] / m;
                        let gs = &g.data()[slab * inner..(slab + 1) * inner];
                        let xs = &xhat.data()[slab * inner..(slab + 1) * inner];
                        for ((d, gy), xh) in dst.iter_mut().zip(gs).zip(xs) {
                            *d = k * (m * gy - gy_sum[ch] - xh * gy_xhat_sum[ch]);
                        }
                    }
                    out.push((*input, Tensor::new(s.to_vec(), gx)?));
                }
                out.push((*gamma, Tensor::new(val(*gamma).shape().to_vec(), gy_xhat_sum)?));
                out.push((*shift, Tensor::new(val(*shift).shape().to_vec(), gy_sum)?));
            }
            Op::BatchNormEval { input, gamma, shift, mean, inv_std } => {
                let gam = val(*gamma).data();
                let zeros = vec![0.0; mean.len()];
                let scale: Vec<f64> = inv_std.iter().zip(gam).map(|(a, b)| a * b).collect();
                if wants(*input) {
                    out.push((*input, kernels::channel_affine(g, &zeros, &scale, &zeros)));
                }
                let xhat = kernels::channel_affine(val(*input), mean, inv_std, &zeros);
                let gx = g.zip_map(&xhat, |a, b| a * b)?;
                out.push((*gamma, Tensor::new(val(*gamma).shape().to_vec(), kernels::channel_sums(&gx))?));
                out.push((*shift, Tensor::new(val(*shift).shape().to_vec(), kernels::channel_sums(g))?));
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw) = kernels::linear_backward(g, val(*input), val(*weight));
                out.push((*input, gx));
                out.push((*weight, gw));
                if let Some(b) = bias {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for (acc, v) in gb.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), gb)?));
                }
            }
            Op::LifMembrane { mem, spk, current, beta, theta } => {
                let b = val(*beta).data()[0];
                let th = val(*theta).data()[0];
                if wants(*mem) {
                    out.push((*mem, g.map(|x| x * b)));
                }
                if wants(*current) {
                    out.push((*current, g.clone()));
                }
                if wants(*spk) {
                    out.push((*spk, g.map(|x| -x * th)));
                }
                if wants(*beta) || wants(*theta) {
                    let (u, s) = (val(*mem).data(), val(*spk).data());
                    let (mut gb, mut gt) = (0.0, 0.0);
                    for ((gv, uv), sv) in g.data().iter().zip(u).zip(s) {
                        gb += gv * uv;
                        gt -= gv * sv;
                    }
                    out.push((*beta, Tensor::new(val(*beta).shape().to_vec(), vec![gb])?));
                    out.push((*theta, Tensor::new(val(*theta).shape().to_vec(), vec![gt])?));
                }
            }
            Op::Spike { mem, theta, slope } => {
                let th = val(*theta).data()[0];
                let local = g.zip_map(val(*mem), |gy, u| gy * surrogate_scalar(u - th, *slope))?;
                if wants(*theta) {
                    out.push((*theta, Tensor::new(val(*theta).shape().to_vec(), vec![-local.sum()])?));
                }
                out.push((*mem, local));
            }
            Op::Bipolar { input } => {
                out.push((*input, g.zip_map(val(*input), |gy, x| if x.abs() <= 1.0 { gy } else { 0.0 })?));
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let c = 2.0 * g.data()[0] / n;
                let d = val(*a).zip_map(val(*b), |x, y| c * (x - y))?;
                out.push((*b, d.map(|x| -x)));
                out.push((*a, d));
            }
            Op::WeightedNll { logits, probs, targets, weights } => {
                let (b, k) = (probs.shape()[0], probs.shape()[1]);
                let c = g.data()[0] / b as f64;
                let mut gl = probs.data().to_vec();
                for row in 0..b {
                    gl[row * k + targets[row]] -= 1.0;
                    for v in &mut gl[row * k..(row + 1) * k] {
                        *v *= c * weights[row];
                    }
                }
                out.push((*logits, Tensor::new(vec![b, k], gl)?));
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Antiderivative of the arctangent surrogate: `atan((π/2)·α·x)/π + 1/2`.
#[inline]
pub fn smooth_step(x: f64, slope: f64) -> f64 {
    (0.5 * PI * slope * x).atan() / PI + 0.5
}

#[inline]
pub fn bipolar_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        1.0
    } else if x < -tau {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise `(beta*u + i) - theta*s`. Shared by the tape op and the eager
/// LIF layer so both produce identical bits.
pub fn membrane_update(u: &[f64], s: &[f64], i: &[f64], beta: f64, theta: f64) -> Vec<f64> {
    u.iter().zip(s).zip(i).map(|((&u, &s), &i)| beta * u + i - theta * s).collect()
}
