//! Spike encoders: the spiking convolutional autoencoder (SCAE), the
//! conventional autoencoder with bipolar thresholding (CAE), and fixed delta
//! thresholding.
//!
//! All three map a `(B, 2, N, R, W)` batch to an encoding of the same shape.
//! SCAE emits `{0,1}`; CAE and delta emit `{-1,0,1}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv3dLayer, ConvTranspose3dLayer, Forward};
use crate::lif::{LifNeurons, LifState, SurrogateConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_channels: usize,
    pub kernel: [usize; 3],
    pub beta: f64,
    pub theta: f64,
    /// Encoder timesteps; the window axis is split into this many chunks.
    pub timesteps: usize,
    /// CAE bipolar threshold τ.
    pub tau: f64,
    pub surrogate: SurrogateConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 64,
            kernel: [1, 1, 3],
            beta: 0.9,
            theta: 1.0,
            timesteps: 2,
            tau: 0.4,
            surrogate: SurrogateConfig::default(),
        }
    }
}

/// Spiking convolutional autoencoder.
#[derive(Clone, Debug)]
pub struct ScaeModel {
    pub conv1: Conv3dLayer,
    pub bn1: BatchNorm,
    pub lif1: LifNeurons,
    pub conv2: Conv3dLayer,
    pub bn2: BatchNorm,
    pub lif2: LifNeurons,
    pub deconv1: ConvTranspose3dLayer,
    pub bn3: BatchNorm,
    pub lif3: LifNeurons,
    pub deconv2: ConvTranspose3dLayer,
    pub timesteps: usize,
}

fn split_chunks(fwd: &mut Forward, x: Var, timesteps: usize) -> Result<Vec<Var>> {
    let s = fwd.tape.shape(x).to_vec();
    if s.len() != 5 || s[1] != 2 {
        return Err(Error::dim("encoder", format!("expected a (B, 2, N, R, W) batch, got {s:?}")));
    }
    if timesteps == 0 || s[2] % timesteps != 0 {
        return Err(Error::config(format!("window count {} is not divisible into {timesteps} timesteps", s[2])));
    }
    let len = s[2] / timesteps;
    (0..timesteps).map(|t| fwd.tape.slice_axis(x, 2, t * len, len)).collect()
}

impl ScaeModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let (h, k) = (cfg.hidden_channels, cfg.kernel);
        let lif = |store: &mut ParamStore, name: &str| LifNeurons::register(store, name, cfg.beta, cfg.theta, false, cfg.surrogate);
        Ok(Self {
            conv1: Conv3dLayer::same(store, "enc.conv1", 2, h, k, rng),
            bn1: BatchNorm::new(store, "enc.bn1", h),
            lif1: lif(store, "enc.lif1")?,
            conv2: Conv3dLayer::same(store, "enc.conv2", h, 2, k, rng),
            bn2: BatchNorm::new(store, "enc.bn2", 2),
            lif2: lif(store, "enc.lif2")?,
            deconv1: ConvTranspose3dLayer::same(store, "dec.deconv1", 2, h, k, rng),
            bn3: BatchNorm::new(store, "dec.bn3", h),
            lif3: lif(store, "dec.lif3")?,
            deconv2: ConvTranspose3dLayer::same(store, "dec.deconv2", h, 2, k, rng),
            timesteps: cfg.timesteps,
        })
    }

    /// Binary spike encoding of `x`. LIF state carries across the window
    /// chunks of one call and starts from rest on every call.
    pub fn encode(&self, fwd: &mut Forward, store: &ParamStore, x: Var) -> Result<Var> {
        let chunks = split_chunks(fwd, x, self.timesteps)?;
        let v1 = self.lif1.vars(fwd.tape, fwd.bound);
        let v2 = self.lif2.vars(fwd.tape, fwd.bound);
        let (mut s1, mut s2) = (LifState::default(), LifState::default());
        let mut out = Vec::with_capacity(chunks.len());
        for c in chunks {
            let h = self.conv1.forward(fwd, c, false)?;
            let h = self.bn1.forward(fwd, h, store)?;
            let h = self.lif1.step(fwd.tape, v1, &mut s1, h)?;
            fwd.trace_spikes(&self.lif1.name, h);
            let h = self.conv2.forward(fwd, h, true)?;
            let h = self.bn2.forward(fwd, h, store)?;
            let spk = self.lif2.step(fwd.tape, v2, &mut s2, h)?;
            fwd.trace_spikes(&self.lif2.name, spk);
            out.push(spk);
        }
        fwd.tape.concat(&out, 2)
    }

    /// Reconstruction in (0,1) from a spike encoding.
    pub fn decode(&self, fwd: &mut Forward, store: &ParamStore, spikes: Var) -> Result<Var> {
        let chunks = split_chunks(fwd, spikes, self.timesteps)?;
        let v3 = self.lif3.vars(fwd.tape, fwd.bound);
        let mut s3 = LifState::default();
        let mut out = Vec::with_capacity(chunks.len());
        for c in chunks {
            let h = self.deconv1.forward(fwd, c, true)?;
            let h = self.bn3.forward(fwd, h, store)?;
            let h = self.lif3.step(fwd.tape, v3, &mut s3, h)?;
            let h = self.deconv2.forward(fwd, h, true)?;
            out.push(fwd.tape.sigmoid(h));
        }
        fwd.tape.concat(&out, 2)
    }

    pub fn lif_layers(&self) -> [&LifNeurons; 3] {
        [&self.lif1, &self.lif2, &self.lif3]
    }
}

/// Conventional convolutional autoencoder with a bipolar spike bottleneck.
#[derive(Clone, Debug)]
pub struct CaeModel {
    pub conv1: Conv3dLayer,
    pub bn1: BatchNorm,
    pub conv2: Conv3dLayer,
    pub bn2: BatchNorm,
    pub deconv1: ConvTranspose3dLayer,
    pub bn3: BatchNorm,
    pub deconv2: ConvTranspose3dLayer,
    pub tau: f64,
}

impl CaeModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return Err(Error::config(format!("bipolar threshold must be positive, got {}", cfg.tau)));
        }
        let (h, k) = (cfg.hidden_channels, cfg.kernel);
        Ok(Self {
            conv1: Conv3dLayer::same(store, "enc.conv1", 2, h, k, rng),
            bn1: BatchNorm::new(store, "enc.bn1", h),
            conv2: Conv3dLayer::same(store, "enc.conv2", h, 2, k, rng),
            bn2: BatchNorm::new(store, "enc.bn2", 2),
            deconv1: ConvTranspose3dLayer::same(store, "dec.deconv1", 2, h, k, rng),
            bn3: BatchNorm::new(store, "dec.bn3", h),
            deconv2: ConvTranspose3dLayer::same(store, "dec.deconv2", h, 2, k, rng),
            tau: cfg.tau,
        })
    }

    /// Pre-threshold activation: batch-normalized output of the second conv.
    pub fn activation(&self, fwd: &mut Forward, store: &ParamStore, x: Var) -> Result<Var> {
        let s = fwd.tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != 2 {
            return Err(Error::dim("cae_encode", format!("expected a (B, 2, N, R, W) batch, got {s:?}")));
        }
        let h = self.conv1.forward(fwd, x, false)?;
        let h = self.bn1.forward(fwd, h, store)?;
        let h = fwd.tape.relu(h);
        let h = self.conv2.forward(fwd, h, false)?;
        self.bn2.forward(fwd, h, store)
    }

    /// Ternary encoding `{-1, 0, 1}` thresholded at `±τ`.
    pub fn encode(&self, fwd: &mut Forward, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.activation(fwd, store, x)?;
        Ok(fwd.tape.bipolar(a, self.tau))
    }

    pub fn decode(&self, fwd: &mut Forward, store: &ParamStore, spikes: Var) -> Result<Var> {
        let h = self.deconv1.forward(fwd, spikes, true)?;
        let h = self.bn3.forward(fwd, h, store)?;
        let h = fwd.tape.relu(h);
        let h = self.deconv2.forward(fwd, h, false)?;
        Ok(fwd.tape.sigmoid(h))
    }
}

/// Delta thresholding of one real `times × bins` matrix (row-major, time
/// first). Row 0 encodes to zeros so the time axis keeps its length.
///
/// `x_δ(n,m) = x(n,m) - x(n-1,m)`; `σ_n` is the population variance of row
/// `n` of `x_δ`; `α` is the mean of the `σ_n`; spikes are `+1` above `α`,
/// `-1` below `-α`, else `0`.
pub fn delta_encode(x: &[f64], times: usize, bins: usize) -> Result<Vec<f64>> {
    if times < 2 {
        return Err(Error::contract(format!("delta encoding needs at least 2 time samples, got {times}")));
    }
    if x.len() != times * bins || bins == 0 {
        return Err(Error::dim("delta_encode", format!("{} values for {times}×{bins}", x.len())));
    }
    let mut diff = vec![0.0; (times - 1) * bins];
    for n in 1..times {
        for m in 0..bins {
            diff[(n - 1) * bins + m] = x[n * bins + m] - x[(n - 1) * bins + m];
        }
    }
    let sigma_sum: f64 = diff
        .chunks_exact(bins)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / bins as f64;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / bins as f64
        })
        .sum();
    let alpha = sigma_sum / (times - 1) as f64;
    let mut out = vec![0.0; times * bins];
    for (o, &d) in out[bins..].iter_mut().zip(&diff) {
        *o = if d > alpha {
            1.0
        } else if d < -alpha {
            -1.0
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Delta-encodes every `(channel, window)` slice of a `(2, N, R, W)` sample
/// or a `(B, 2, N, R, W)` batch. Slow time is the `W` axis, bins the `R` axis.
pub fn delta_encode_sample(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 4 {
        return Err(Error::dim("delta_encode", format!("expected (.., 2, N, R, W), got {s:?}")));
    }
    let (r, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![0.0; x.len()];
    let mut mat = vec![0.0; w * r];
    for (slab_in, slab_out) in x.data().chunks_exact(r * w).zip(out.chunks_exact_mut(r * w)) {
        // transpose (R, W) -> (time W, bin R)
        for ri in 0..r {
            for t in 0..w {
                mat[t * r + ri] = slab_in[ri * w + t];
            }
        }
        let enc = delta_encode(&mat, w, r)?;
        for ri in 0..r {
            for t in 0..w {
                slab_out[ri * w + t] = enc[t * r + ri];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
