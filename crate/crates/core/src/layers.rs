//! Parameterized building blocks and the per-pass forward context.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::Conv3dGeom;
use crate::metrics::ModelTrace;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    momentum: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: Option<ModelTrace>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, bound: &'a Bound, mode: Mode) -> Self {
        Self { tape, bound, mode, bn_updates: Vec::new(), trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(ModelTrace::default());
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn trace_spikes(&mut self, layer: &str, spikes: Var) {
        if let Some(t) = &mut self.trace {
            t.record_spikes(layer, self.tape.value(spikes));
        }
    }

    fn trace_input(&mut self, layer: &str, input: Var, event_driven: bool, fan_out: u64, dense_macs: u64) {
        if let Some(t) = &mut self.trace {
            if event_driven {
                t.record_events(layer, self.tape.value(input), fan_out);
            } else {
                t.record_dense(layer, dense_macs);
            }
        }
    }
}

/// Applies running-statistics updates in the order they were produced.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, the usual default for conv and linear layers.
fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub name: String,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub ksize: [usize; 3],
    pub geom: Conv3dGeom,
}

impl Conv3dLayer {
    /// Stride-1, same-padded convolution.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        ksize: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * ksize.iter().product::<usize>();
        let kshape = [out_channels, in_channels, ksize[0], ksize[1], ksize[2]];
        let kernel = store.add(format!("{name}.weight"), init_uniform(&kshape, fan_in, rng), ParamKind::Trainable);
        let bias = store.add(format!("{name}.bias"), init_uniform(&[out_channels], fan_in, rng), ParamKind::Trainable);
        Self { name: name.into(), kernel, bias, in_channels, out_channels, ksize, geom: Conv3dGeom::same(ksize) }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.ksize.iter().product::<usize>() + self.out_channels
    }

    /// Accumulates per input event: output channels × kernel volume.
    pub fn fan_out(&self) -> u64 {
        (self.out_channels * self.ksize.iter().product::<usize>()) as u64
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var, event_input: bool) -> Result<Var> {
        let y = fwd.tape.conv3d(x, fwd.var(self.kernel), Some(fwd.var(self.bias)), self.geom)?;
        let s = fwd.tape.shape(y);
        let macs = (s.iter().product::<usize>() * self.in_channels * self.ksize.iter().product::<usize>()) as u64;
        fwd.trace_input(&self.name, x, event_input, self.fan_out(), macs);
        Ok(y)
    }

    /// Trace-only: dense re-presentation of input `x` whose output is `y`.
    pub fn trace_repeat(&self, fwd: &mut Forward, x: Var, y: Var) {
        let macs = (fwd.tape.value(y).len() * self.in_channels * self.ksize.iter().product::<usize>()) as u64;
        fwd.trace_input(&self.name, x, false, self.fan_out(), macs);
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3dLayer {
    pub name: String,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub ksize: [usize; 3],
    pub geom: Conv3dGeom,
}

impl ConvTranspose3dLayer {
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        ksize: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = out_channels * ksize.iter().product::<usize>();
        let kshape = [in_channels, out_channels, ksize[0], ksize[1], ksize[2]];
        let kernel = store.add(format!("{name}.weight"), init_uniform(&kshape, fan_in, rng), ParamKind::Trainable);
        let bias = store.add(format!("{name}.bias"), init_uniform(&[out_channels], fan_in, rng), ParamKind::Trainable);
        Self { name: name.into(), kernel, bias, in_channels, out_channels, ksize, geom: Conv3dGeom::same(ksize) }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.ksize.iter().product::<usize>() + self.out_channels
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var, event_input: bool) -> Result<Var> {
        let y = fwd.tape.conv_transpose3d(x, fwd.var(self.kernel), Some(fwd.var(self.bias)), self.geom)?;
        let kv = self.ksize.iter().product::<usize>();
        let macs = (fwd.tape.value(x).len() * self.out_channels * kv) as u64;
        fwd.trace_input(&self.name, x, event_input, (self.out_channels * kv) as u64, macs);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable),
            shift: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var, store: &ParamStore) -> Result<Var> {
        let (g, b) = (fwd.var(self.gamma), fwd.var(self.shift));
        match fwd.mode {
            Mode::Train => {
                let out = fwd.tape.batch_norm_train(x, g, b, self.eps)?;
                let s = fwd.tape.shape(x);
                let count = (s.iter().product::<usize>() / s[1]) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                fwd.bn_updates.push(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    momentum: self.momentum,
                    mean: out.mean,
                    var: out.var.iter().map(|v| v * unbiased).collect(),
                });
                Ok(out.out)
            }
            Mode::Eval => fwd.tape.batch_norm_eval(
                x,
                g,
                b,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                self.eps,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[out_features, in_features], in_features, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(&[out_features], in_features, rng), ParamKind::Trainable);
        Self { name: name.into(), weight, bias, in_features, out_features }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var, event_input: bool) -> Result<Var> {
        let y = fwd.tape.linear(x, fwd.var(self.weight), Some(fwd.var(self.bias)))?;
        let batch = fwd.tape.shape(x)[0];
        let macs = (batch * self.in_features * self.out_features) as u64;
        fwd.trace_input(&self.name, x, event_input, self.out_features as u64, macs);
        Ok(y)
    }

    /// Trace-only: re-presentation of an already computed constant input.
    pub fn trace_repeat(&self, fwd: &mut Forward, x: Var, event_input: bool) {
        let batch = fwd.tape.shape(x)[0];
        let macs = (batch * self.in_features * self.out_features) as u64;
        fwd.trace_input(&self.name, x, event_input, self.out_features as u64, macs);
    }
}
