//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Keys are namespaced with a
//! dot (`train.batch_size`). Unknown keys and unparsable values are errors
//! naming the key; all problems in a file are reported together.

use std::path::Path;
use std::str::FromStr;

use crate::classifier::{ClassifierConfig, DirectKind, DirectSnnSpec};
use crate::corpus::CorpusConfig;
use crate::data_io::SynthConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::lif::SurrogateConfig;
use crate::preprocess::PreprocessParams;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    /// Hidden widths of the linear Direct-SNN.
    pub direct_widths: Vec<usize>,
    /// Conv blocks of the convolutional Direct-SNN.
    pub direct_conv_depth: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                synth: SynthConfig::default(),
                preprocess: PreprocessParams::default(),
                subjects: 7,
                recordings_per_class: 1,
            },
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            direct_widths: vec![64, 128],
            direct_conv_depth: 1,
        }
    }
}

impl RunConfig {
    /// Direct-SNN spec for the linear or conv variant.
    pub fn direct_spec(&self, conv: bool) -> DirectSnnSpec {
        let kind = if conv {
            DirectKind::Conv { depth: self.direct_conv_depth, kernel: self.encoder.kernel }
        } else {
            DirectKind::Linear { widths: self.direct_widths.clone() }
        };
        DirectSnnSpec { kind, timesteps: self.classifier.timesteps }
    }
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "synth.noise_std",
    "synth.clutter_amplitude",
    "synth.packets",
    "synth.bins",
    "synth.sampling_period",
    "synth.jitter",
    "synth.seed",
    "synth.subjects",
    "synth.recordings_per_class",
    "preprocess.window",
    "preprocess.step",
    "preprocess.bins",
    "preprocess.segment",
    "train.batch_size",
    "train.learning_rate",
    "train.max_epochs",
    "train.patience",
    "train.gamma",
    "train.class_weights",
    "train.seed",
    "encoder.hidden_channels",
    "encoder.kernel",
    "encoder.beta",
    "encoder.theta",
    "encoder.timesteps",
    "encoder.tau",
    "classifier.hidden",
    "classifier.classes",
    "classifier.timesteps",
    "classifier.beta",
    "classifier.theta",
    "classifier.pool_kernel",
    "classifier.pool_stride",
    "surrogate.slope",
    "direct.widths",
    "direct.conv_depth",
];

fn scalar<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn triple(key: &str, v: &str) -> std::result::Result<[usize; 3], String> {
    let l: Vec<usize> = list(key, v)?;
    l.try_into().map_err(|_| format!("{key}: expected three comma-separated integers, got '{v}'"))
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let c = &mut cfg.corpus;
    match key {
        "synth.noise_std" => c.synth.noise_std = scalar(key, v)?,
        "synth.clutter_amplitude" => c.synth.clutter_amplitude = scalar(key, v)?,
        "synth.packets" => c.synth.packets = scalar(key, v)?,
        "synth.bins" => c.synth.bins = scalar(key, v)?,
        "synth.sampling_period" => c.synth.sampling_period = scalar(key, v)?,
        "synth.jitter" => c.synth.jitter = scalar(key, v)?,
        "synth.seed" => c.synth.seed = scalar(key, v)?,
        "synth.subjects" => c.subjects = scalar(key, v)?,
        "synth.recordings_per_class" => c.recordings_per_class = scalar(key, v)?,
        "preprocess.window" => c.preprocess.window = scalar(key, v)?,
        "preprocess.step" => c.preprocess.step = scalar(key, v)?,
        "preprocess.bins" => c.preprocess.bins = scalar(key, v)?,
        "preprocess.segment" => c.preprocess.segment = scalar(key, v)?,
        "train.batch_size" => cfg.train.batch_size = scalar(key, v)?,
        "train.learning_rate" => cfg.train.learning_rate = scalar(key, v)?,
        "train.max_epochs" => cfg.train.max_epochs = scalar(key, v)?,
        "train.patience" => cfg.train.patience = scalar(key, v)?,
        "train.gamma" => cfg.train.gamma = scalar(key, v)?,
        "train.class_weights" => cfg.train.class_weights = list(key, v)?,
        "train.seed" => cfg.train.seed = scalar(key, v)?,
        "encoder.hidden_channels" => cfg.encoder.hidden_channels = scalar(key, v)?,
        "encoder.kernel" => cfg.encoder.kernel = triple(key, v)?,
        "encoder.beta" => cfg.encoder.beta = scalar(key, v)?,
        "encoder.theta" => cfg.encoder.theta = scalar(key, v)?,
        "encoder.timesteps" => cfg.encoder.timesteps = scalar(key, v)?,
        "encoder.tau" => cfg.encoder.tau = scalar(key, v)?,
        "classifier.hidden" => cfg.classifier.hidden = list(key, v)?,
        "classifier.classes" => cfg.classifier.classes = scalar(key, v)?,
        "classifier.timesteps" => cfg.classifier.timesteps = scalar(key, v)?,
        "classifier.beta" => cfg.classifier.beta = scalar(key, v)?,
        "classifier.theta" => cfg.classifier.theta = scalar(key, v)?,
        "classifier.pool_kernel" => cfg.classifier.pool_kernel = triple(key, v)?,
        "classifier.pool_stride" => cfg.classifier.pool_stride = triple(key, v)?,
        "surrogate.slope" => {
            let s = SurrogateConfig::new(scalar(key, v)?).map_err(|e| format!("{key}: {e}"))?;
            cfg.encoder.surrogate = s;
            cfg.classifier.surrogate = s;
        }
        "direct.widths" => cfg.direct_widths = list(key, v)?,
        "direct.conv_depth" => cfg.direct_conv_depth = scalar(key, v)?,
        _ => return Err(format!("unknown config key '{key}'")),
    }
    Ok(())
}

/// Applies `text` on top of `base`.
pub fn parse_onto(base: RunConfig, text: &str) -> Result<RunConfig> {
    let mut cfg = base;
    let mut problems = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            problems.push(format!("line {}: expected key = value, got '{line}'", n + 1));
            continue;
        };
        if let Err(e) = apply(&mut cfg, k.trim(), v.trim()) {
            problems.push(format!("line {}: {e}", n + 1));
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::config(problems.join("; ")))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_onto(RunConfig::default(), text)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
