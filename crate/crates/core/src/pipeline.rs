//! End-to-end models: an optional spike encoder in front of a spiking
//! classifier, plus checkpoint persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::classifier::{build_direct_snn, rate_decode, ClassifierConfig, DirectSnn, DirectSnnSpec, SnnClassifier};
use crate::encoders::{delta_encode_sample, CaeModel, EncoderConfig, ScaeModel};
use crate::error::{Error, Result};
use crate::layers::{BnUpdate, Forward, Mode};
use crate::lif::LifNeurons;
use crate::metrics::ModelTrace;
use crate::params::{ParamCount, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Scae,
    Cae,
    Delta,
    DirectLin,
    DirectConv,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Scae, Method::Cae, Method::Delta, Method::DirectLin, Method::DirectConv];

    pub fn name(self) -> &'static str {
        match self {
            Method::Scae => "scae",
            Method::Cae => "cae",
            Method::Delta => "delta",
            Method::DirectLin => "direct-lin",
            Method::DirectConv => "direct-conv",
        }
    }

    /// Whether training includes the reconstruction term.
    pub fn has_decoder(self) -> bool {
        matches!(self, Method::Scae | Method::Cae)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}', expected one of scae, cae, delta, direct-lin, direct-conv")))
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub method: Method,
    pub sample_shape: [usize; 4],
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub direct: DirectSnnSpec,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(method: Method, sample_shape: [usize; 4], seed: u64) -> Self {
        let direct = match method {
            Method::DirectConv => DirectSnnSpec::conv(1),
            _ => DirectSnnSpec::linear3(),
        };
        Self {
            method,
            sample_shape,
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            direct,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Scae(ScaeModel),
    Cae(CaeModel),
    Delta,
    None,
}

#[derive(Clone, Debug)]
enum Head {
    Snn(SnnClassifier),
    Direct(DirectSnn),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    encoder: Encoder,
    head: Head,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub input: Var,
    pub counts: Var,
    pub encoding: Option<Var>,
    pub recon: Option<Var>,
}

/// Eval-mode results for one batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub counts: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub encoding: Option<Tensor>,
    pub trace: ModelTrace,
}

/// Stacks equally shaped tensors along a new leading batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::contract("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        t.expect_same_shape(first, "stack")?;
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1..].iter().product::<usize>().max(1);
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let shape = spec.sample_shape;
        if shape[0] != 2 || shape.contains(&0) {
            return Err(Error::config(format!("sample shape {shape:?} must be (2, N, R, W) with positive extents")));
        }
        let encoder = match spec.method {
            Method::Scae => Encoder::Scae(ScaeModel::new(&mut store, &spec.encoder, &mut rng)?),
            Method::Cae => Encoder::Cae(CaeModel::new(&mut store, &spec.encoder, &mut rng)?),
            Method::Delta => Encoder::Delta,
            Method::DirectLin | Method::DirectConv => Encoder::None,
        };
        if matches!(encoder, Encoder::Scae(_)) && shape[1] % spec.encoder.timesteps != 0 {
            return Err(Error::config(format!(
                "segment length {} is not divisible into {} encoder timesteps",
                shape[1], spec.encoder.timesteps
            )));
        }
        let head = match spec.method {
            Method::DirectLin | Method::DirectConv => {
                Head::Direct(build_direct_snn(&mut store, &spec.direct, shape, &spec.classifier, &mut rng)?)
            }
            _ => Head::Snn(SnnClassifier::new(&mut store, "cls", shape, &spec.classifier, &mut rng)?),
        };
        Ok(Self { spec, store, encoder, head })
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    /// Classifier timesteps configured for this model.
    pub fn timesteps(&self) -> usize {
        match &self.head {
            Head::Snn(c) => c.timesteps,
            Head::Direct(d) => d.timesteps(),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        self.store.count()
    }

    pub fn lif_layers(&self) -> Vec<&LifNeurons> {
        let mut out: Vec<&LifNeurons> = match &self.encoder {
            Encoder::Scae(s) => s.lif_layers().to_vec(),
            _ => Vec::new(),
        };
        match &self.head {
            Head::Snn(c) => out.extend(c.lif_layers()),
            Head::Direct(d) => out.extend(d.lif_layers()),
        }
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 5 || s[1..] != self.spec.sample_shape {
            return Err(Error::dim(
                "model",
                format!("batch shape {s:?} does not match model sample shape {:?}", self.spec.sample_shape),
            ));
        }
        Ok(())
    }

    /// Records the encoder part of a pass; returns the encoding (or the raw
    /// input for encoder-free methods).
    fn encode_var(&self, fwd: &mut Forward, x: Var, batch: &Tensor) -> Result<(Var, Option<Var>)> {
        Ok(match &self.encoder {
            Encoder::Scae(m) => {
                let e = m.encode(fwd, &self.store, x)?;
                (e, Some(e))
            }
            Encoder::Cae(m) => {
                let e = m.encode(fwd, &self.store, x)?;
                (e, Some(e))
            }
            Encoder::Delta => {
                let e = fwd.tape.constant(delta_encode_sample(batch)?);
                (e, Some(e))
            }
            Encoder::None => (x, None),
        })
    }

    fn classify_var(&self, fwd: &mut Forward, input: Var, timesteps: usize) -> Result<Var> {
        match &self.head {
            Head::Snn(c) => c.forward(fwd, input, timesteps),
            Head::Direct(d) => d.forward(fwd, input, timesteps),
        }
    }

    /// Full forward pass for a `(B, 2, N, R, W)` batch. The decoder runs only
    /// when `with_recon` is set.
    pub fn forward(&self, fwd: &mut Forward, batch: &Tensor, timesteps: usize, with_recon: bool) -> Result<Outputs> {
        self.check_batch(batch)?;
        let x = fwd.tape.constant(batch.clone());
        let (input, encoding) = self.encode_var(fwd, x, batch)?;
        let recon = match (&self.encoder, with_recon) {
            (Encoder::Scae(m), true) => Some(m.decode(fwd, &self.store, input)?),
            (Encoder::Cae(m), true) => Some(m.decode(fwd, &self.store, input)?),
            _ => None,
        };
        let counts = self.classify_var(fwd, input, timesteps)?;
        Ok(Outputs { input: x, counts, encoding, recon })
    }

    /// Encoder output in eval mode; `None` for encoder-free methods.
    pub fn encode(&self, batch: &Tensor) -> Result<Option<Tensor>> {
        self.check_batch(batch)?;
        if matches!(self.encoder, Encoder::None) {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, Mode::Eval);
        let x = fwd.tape.constant(batch.clone());
        let (e, _) = self.encode_var(&mut fwd, x, batch)?;
        Ok(Some(fwd.tape.value(e).clone()))
    }

    /// Classifier counts in eval mode for an encoding (or raw batch for
    /// encoder-free methods).
    pub fn classify(&self, input: &Tensor, timesteps: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, Mode::Eval);
        let x = fwd.tape.constant(input.clone());
        let c = self.classify_var(&mut fwd, x, timesteps)?;
        Ok(rows(fwd.tape.value(c)))
    }

    /// Eval-mode inference with an activity trace.
    pub fn predict(&self, batch: &Tensor, timesteps: usize) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, Mode::Eval).with_trace();
        let out = self.forward(&mut fwd, batch, timesteps, false)?;
        let trace = fwd.trace.take().unwrap_or_default();
        let counts = rows(fwd.tape.value(out.counts));
        let labels = counts.iter().map(|c| rate_decode(c)).collect::<Result<_>>()?;
        let encoding = out.encoding.map(|e| fwd.tape.value(e).clone());
        Ok(Prediction { counts, labels, encoding, trace })
    }

    /// Train-mode pass: returns the tape with outputs and pending
    /// batch-norm statistics.
    pub fn train_forward<'t>(
        &self,
        tape: &'t mut Tape,
        bound: &'t crate::params::Bound,
        batch: &Tensor,
    ) -> Result<(Outputs, Vec<BnUpdate>)> {
        let mut fwd = Forward::new(tape, bound, Mode::Train);
        let out = self.forward(&mut fwd, batch, self.timesteps(), self.method().has_decoder())?;
        Ok((out, fwd.bn_updates))
    }

    /// Writes the weights as SPKC to `path` and the spec as JSON alongside.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store.named_tensors())?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(spec_path(path), spec)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(spec_path(path))?;
        let spec: ModelSpec = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("model spec {}: {e}", spec_path(path).display())))?;
        let mut model = Model::new(spec)?;
        model.store.load_named(&checkpoint::load(path)?)?;
        Ok(model)
    }
}

/// Location of the JSON architecture file next to a checkpoint.
pub fn spec_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> ModelSpec {
        let mut spec = ModelSpec::new(method, [2, 4, 4, 8], 3);
        spec.encoder.hidden_channels = 4;
        spec.classifier.hidden = vec![6, 5];
        spec.classifier.timesteps = 3;
        spec
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lstm".parse::<Method>().is_err());
    }

    #[test]
    fn every_method_predicts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Tensor::uniform(&[3, 2, 4, 4, 8], 1.0, &mut rng).map(|v| v.abs());
        for m in Method::ALL {
            let mut spec = small(m);
            if m == Method::DirectConv {
                spec.direct = DirectSnnSpec { timesteps: 3, ..DirectSnnSpec::conv(1) };
            } else {
                spec.direct.timesteps = 3;
            }
            let model = Model::new(spec).unwrap();
            let p = model.predict(&batch, model.timesteps()).unwrap();
            assert_eq!(p.labels.len(), 3, "{m}");
            assert!(p.counts.iter().flatten().all(|&c| (0.0..=3.0).contains(&c)));
        }
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let model = Model::new(small(Method::Scae)).unwrap();
        assert!(matches!(model.predict(&Tensor::zeros(&[1, 2, 4, 4, 9]), 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spkc");
        let model = Model::new(small(Method::Cae)).unwrap();
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.store.named_tensors(), model.store.named_tensors());
    }
}
