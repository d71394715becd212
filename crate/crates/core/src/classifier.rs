//! Spiking classifier head with rate decoding, and the Direct-SNN baselines
//! that classify preprocessed samples without an encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv3dLayer, Forward, Linear};
use crate::lif::{LifNeurons, LifState, SurrogateConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Hidden LIF layer widths; the output layer has `classes` neurons.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub timesteps: usize,
    pub beta: f64,
    pub theta: f64,
    pub pool_kernel: [usize; 3],
    pub pool_stride: [usize; 3],
    pub surrogate: SurrogateConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            classes: 4,
            timesteps: 29,
            beta: 0.9,
            theta: 0.8,
            pool_kernel: [1, 1, 4],
            pool_stride: [1, 2, 2],
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.timesteps == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "classifier needs positive widths, classes and timesteps (hidden {:?}, classes {}, timesteps {})",
                self.hidden, self.classes, self.timesteps
            )));
        }
        Ok(())
    }
}

/// Flattened feature count after pooling `(C, N, R, W)` over `(N, R, W)` and
/// averaging over `N`.
pub fn feature_dim(sample_shape: [usize; 4], kernel: [usize; 3], stride: [usize; 3]) -> Result<usize> {
    let [c, _, r, w] = sample_shape;
    let out = |d: usize, k: usize, s: usize| if d >= k && s > 0 { Some((d - k) / s + 1) } else { None };
    match (out(sample_shape[1], kernel[0], stride[0]), out(r, kernel[1], stride[1]), out(w, kernel[2], stride[2])) {
        (Some(_), Some(r2), Some(w2)) => Ok(c * r2 * w2),
        _ => Err(Error::config(format!("pool kernel {kernel:?} does not fit sample shape {sample_shape:?}"))),
    }
}

/// `(B, C, N, R, W)` → pooled, averaged over `N`, flattened to `(B, d)`.
pub fn pooled_features(fwd: &mut Forward, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
    let p = fwd.tape.avg_pool3d(x, kernel, stride)?;
    let m = fwd.tape.mean_axis(p, 2)?;
    let s = fwd.tape.shape(m).to_vec();
    fwd.tape.reshape(m, &[s[0], s[1..].iter().product()])
}

/// Fully connected LIF stack driven by a constant input current.
#[derive(Clone, Debug)]
pub struct LifStack {
    pub linears: Vec<Linear>,
    pub lifs: Vec<LifNeurons>,
}

impl LifStack {
    /// `widths[0]` is the input size; the last layer gets a frozen θ = 1.
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        beta: f64,
        theta: f64,
        surrogate: SurrogateConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut linears = Vec::new();
        let mut lifs = Vec::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            let name = format!("{prefix}.fc{}", i + 1);
            linears.push(Linear::new(store, &name, pair[0], pair[1], rng));
            let (th, frozen) = if i == last { (1.0, true) } else { (theta, false) };
            lifs.push(LifNeurons::register(store, &format!("{name}.lif"), beta, th, frozen, surrogate)?);
        }
        Ok(Self { linears, lifs })
    }

    /// Runs `timesteps` steps with `first_current` presented at every step
    /// and returns the summed output spikes `(B, classes)`.
    fn run(&self, fwd: &mut Forward, input: Var, first_current: Var, timesteps: usize) -> Result<Var> {
        let vars: Vec<_> = self.lifs.iter().map(|l| l.vars(fwd.tape, fwd.bound)).collect();
        let mut states = vec![LifState::default(); self.lifs.len()];
        let mut counts: Option<Var> = None;
        for t in 0..timesteps {
            if t > 0 {
                self.linears[0].trace_repeat(fwd, input, false);
            }
            let mut cur = first_current;
            let mut spk = cur;
            for (i, lif) in self.lifs.iter().enumerate() {
                if i > 0 {
                    cur = self.linears[i].forward(fwd, spk, true)?;
                }
                spk = lif.step(fwd.tape, vars[i], &mut states[i], cur)?;
                fwd.trace_spikes(&lif.name, spk);
            }
            counts = Some(match counts {
                Some(c) => fwd.tape.add(c, spk)?,
                None => spk,
            });
        }
        counts.ok_or_else(|| Error::config("classifier needs at least one timestep"))
    }
}

/// Pooling followed by fully connected LIF layers; decodes by spike count.
#[derive(Clone, Debug)]
pub struct SnnClassifier {
    pub pool_kernel: [usize; 3],
    pub pool_stride: [usize; 3],
    pub input_dim: usize,
    pub stack: LifStack,
    pub timesteps: usize,
}

impl SnnClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sample_shape: [usize; 4],
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = feature_dim(sample_shape, cfg.pool_kernel, cfg.pool_stride)?;
        let mut widths = vec![d];
        widths.extend(&cfg.hidden);
        widths.push(cfg.classes);
        Ok(Self {
            pool_kernel: cfg.pool_kernel,
            pool_stride: cfg.pool_stride,
            input_dim: d,
            stack: LifStack::new(store, prefix, &widths, cfg.beta, cfg.theta, cfg.surrogate, rng)?,
            timesteps: cfg.timesteps,
        })
    }

    /// Spike counts `(B, classes)` for a `(B, C, N, R, W)` encoding.
    pub fn forward(&self, fwd: &mut Forward, x: Var, timesteps: usize) -> Result<Var> {
        let f = pooled_features(fwd, x, self.pool_kernel, self.pool_stride)?;
        let d = fwd.tape.shape(f)[1];
        if d != self.input_dim {
            return Err(Error::dim(
                "snn_forward",
                format!("pooled encoding has {d} features, classifier expects d = {}", self.input_dim),
            ));
        }
        self.forward_features(fwd, f, timesteps)
    }

    /// Spike counts for already pooled `(B, d)` features.
    pub fn forward_features(&self, fwd: &mut Forward, f: Var, timesteps: usize) -> Result<Var> {
        let cur = self.stack.linears[0].forward(fwd, f, false)?;
        self.stack.run(fwd, f, cur, timesteps)
    }

    pub fn lif_layers(&self) -> &[LifNeurons] {
        &self.stack.lifs
    }
}

/// Index of the largest count; ties go to the lowest index.
pub fn rate_decode(counts: &[f64]) -> Result<usize> {
    if counts.is_empty() {
        return Err(Error::contract("cannot decode an empty count vector"));
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectKind {
    /// Pooled input followed by fully connected LIF layers of these widths
    /// (the class count is appended).
    Linear { widths: Vec<usize> },
    /// `depth` conv + LIF blocks, channels 64 → 128 → 256, then a linear
    /// readout into the output LIF layer.
    Conv { depth: usize, kernel: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectSnnSpec {
    pub kind: DirectKind,
    pub timesteps: usize,
}

pub const CONV_CHANNELS: [usize; 3] = [64, 128, 256];

impl DirectSnnSpec {
    /// Three-layer 64–128–N_C variant.
    pub fn linear3() -> Self {
        Self { kind: DirectKind::Linear { widths: vec![64, 128] }, timesteps: 29 }
    }

    /// Four-layer 64–128–256–N_C variant.
    pub fn linear4() -> Self {
        Self { kind: DirectKind::Linear { widths: vec![64, 128, 256] }, timesteps: 29 }
    }

    pub fn conv(depth: usize) -> Self {
        Self { kind: DirectKind::Conv { depth, kernel: [1, 1, 3] }, timesteps: 29 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::config("direct SNN needs at least one timestep"));
        }
        match &self.kind {
            DirectKind::Linear { widths } if widths.is_empty() || widths.contains(&0) => {
                Err(Error::config(format!("unsupported direct SNN widths {widths:?}")))
            }
            DirectKind::Conv { depth, .. } if !(1..=CONV_CHANNELS.len()).contains(depth) => {
                Err(Error::config(format!("unsupported direct SNN conv depth {depth}, expected 1 to 3")))
            }
            DirectKind::Conv { kernel, .. } if kernel.iter().any(|&k| k % 2 == 0) => {
                Err(Error::config(format!("conv kernel {kernel:?} must have odd extents")))
            }
            _ => Ok(()),
        }
    }
}

/// Convolutional spiking network fed with the raw sample as input current.
#[derive(Clone, Debug)]
pub struct ConvSnn {
    pub convs: Vec<Conv3dLayer>,
    pub lifs: Vec<LifNeurons>,
    pub readout: Linear,
    pub output: LifNeurons,
    pub timesteps: usize,
    pub sample_shape: [usize; 4],
}

impl ConvSnn {
    /// Spike counts `(B, classes)` for a `(B, C, N, R, W)` batch.
    pub fn forward(&self, fwd: &mut Forward, x: Var, timesteps: usize) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        if s.len() != 5 || s[1..] != self.sample_shape {
            return Err(Error::dim("direct_conv", format!("expected (B, {:?}), got {s:?}", self.sample_shape)));
        }
        let vars: Vec<_> = self.lifs.iter().map(|l| l.vars(fwd.tape, fwd.bound)).collect();
        let out_vars = self.output.vars(fwd.tape, fwd.bound);
        let mut states = vec![LifState::default(); self.lifs.len()];
        let mut out_state = LifState::default();
        let first = self.convs[0].forward(fwd, x, false)?;
        let mut counts: Option<Var> = None;
        for t in 0..timesteps {
            if t > 0 {
                self.convs[0].trace_repeat(fwd, x, first);
            }
            let mut spk = self.lifs[0].step(fwd.tape, vars[0], &mut states[0], first)?;
            fwd.trace_spikes(&self.lifs[0].name, spk);
            for i in 1..self.convs.len() {
                let cur = self.convs[i].forward(fwd, spk, true)?;
                spk = self.lifs[i].step(fwd.tape, vars[i], &mut states[i], cur)?;
                fwd.trace_spikes(&self.lifs[i].name, spk);
            }
            let m = fwd.tape.mean_axis(spk, 2)?;
            let ms = fwd.tape.shape(m).to_vec();
            let flat = fwd.tape.reshape(m, &[ms[0], ms[1..].iter().product()])?;
            let cur = self.readout.forward(fwd, flat, false)?;
            let out = self.output.step(fwd.tape, out_vars, &mut out_state, cur)?;
            fwd.trace_spikes(&self.output.name, out);
            counts = Some(match counts {
                Some(c) => fwd.tape.add(c, out)?,
                None => out,
            });
        }
        counts.ok_or_else(|| Error::config("direct SNN needs at least one timestep"))
    }

    pub fn lif_layers(&self) -> Vec<&LifNeurons> {
        self.lifs.iter().chain(std::iter::once(&self.output)).collect()
    }
}

/// A constructed Direct-SNN baseline.
#[derive(Clone, Debug)]
pub enum DirectSnn {
    Linear(SnnClassifier),
    Conv(ConvSnn),
}

impl DirectSnn {
    pub fn forward(&self, fwd: &mut Forward, x: Var, timesteps: usize) -> Result<Var> {
        match self {
            DirectSnn::Linear(c) => c.forward(fwd, x, timesteps),
            DirectSnn::Conv(c) => c.forward(fwd, x, timesteps),
        }
    }

    pub fn timesteps(&self) -> usize {
        match self {
            DirectSnn::Linear(c) => c.timesteps,
            DirectSnn::Conv(c) => c.timesteps,
        }
    }

    pub fn lif_layers(&self) -> Vec<&LifNeurons> {
        match self {
            DirectSnn::Linear(c) => c.lif_layers().iter().collect(),
            DirectSnn::Conv(c) => c.lif_layers(),
        }
    }
}

/// Builds a Direct-SNN variant for samples of shape `sample_shape`. LIF
/// initialisation and pooling follow `cls`.
pub fn build_direct_snn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    spec: &DirectSnnSpec,
    sample_shape: [usize; 4],
    cls: &ClassifierConfig,
    rng: &mut R,
) -> Result<DirectSnn> {
    spec.validate()?;
    match &spec.kind {
        DirectKind::Linear { widths } => {
            let cfg = ClassifierConfig { hidden: widths.clone(), timesteps: spec.timesteps, ..cls.clone() };
            Ok(DirectSnn::Linear(SnnClassifier::new(store, "direct", sample_shape, &cfg, rng)?))
        }
        &DirectKind::Conv { depth, kernel } => {
            let mut convs = Vec::new();
            let mut lifs = Vec::new();
            let mut cin = sample_shape[0];
            for (i, &cout) in CONV_CHANNELS[..depth].iter().enumerate() {
                let name = format!("direct.conv{}", i + 1);
                convs.push(Conv3dLayer::same(store, &name, cin, cout, kernel, rng));
                lifs.push(LifNeurons::register(store, &format!("{name}.lif"), cls.beta, cls.theta, false, cls.surrogate)?);
                cin = cout;
            }
            let d = cin * sample_shape[2] * sample_shape[3];
            let readout = Linear::new(store, "direct.readout", d, cls.classes, rng);
            let output = LifNeurons::register(store, "direct.readout.lif", cls.beta, 1.0, true, cls.surrogate)?;
            Ok(DirectSnn::Conv(ConvSnn { convs, lifs, readout, output, timesteps: spec.timesteps, sample_shape }))
        }
    }
}
