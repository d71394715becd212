//! Losses, Adam, and the joint encoder + classifier training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::apply_bn_updates;
use crate::metrics::macro_f1;
use crate::parallel;
use crate::params::{ParamCount, ParamId, ParamStore};
use crate::pipeline::{stack, Method, Model};
use crate::preprocess::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation macro-F1 improvement before stopping.
    pub patience: usize,
    /// Weight γ of the classification term.
    pub gamma: f64,
    /// Per-class multipliers of the classification loss (walking, running,
    /// sitting, waving).
    pub class_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            max_epochs: 50,
            patience: 15,
            gamma: 1.0,
            class_weights: vec![0.3, 0.3, 0.6, 1.0],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be positive".to_string());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            out.push(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.class_weights.is_empty() {
            out.push("class_weights must not be empty".to_string());
        }
        for (i, w) in self.class_weights.iter().enumerate() {
            if !(*w > 0.0 && *w <= 1.0) {
                out.push(format!("class_weights[{i}] = {w} is outside (0, 1]"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }
}

/// Mean squared error between input and reconstruction.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    tape.mse(x, x_hat)
}

/// Weighted cross-entropy of `softmax(counts)`, averaged over the batch.
///
/// The printed formula for this loss lacks the leading minus sign, which would
/// make it a quantity to maximise; the negative log-likelihood is used.
pub fn classification_loss(tape: &mut Tape, counts: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var> {
    let per_sample = targets
        .iter()
        .map(|&t| {
            class_weights
                .get(t)
                .copied()
                .ok_or_else(|| Error::contract(format!("class {t} out of range for {} classes", class_weights.len())))
        })
        .collect::<Result<Vec<f64>>>()?;
    tape.weighted_nll(counts, targets, &per_sample)
}

/// `l_rec + γ·l_class`; without a reconstruction term just `γ·l_class`.
pub fn total_loss(tape: &mut Tape, l_rec: Option<Var>, l_class: Var, gamma: f64) -> Result<Var> {
    let c = tape.scale(l_class, gamma);
    match l_rec {
        Some(r) => tape.add(r, c),
        None => Ok(c),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let ids = store.trainable_ids();
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self { config: AdamConfig::default(), step: 0, ids, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update. Fails before touching anything if a
/// gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::contract(format!("{} gradients for {} trainable parameters", grads.len(), state.ids.len())));
    }
    for ((id, g), &sid) in grads.iter().zip(&state.ids) {
        if *id != sid {
            return Err(Error::contract("gradients are not in trainable-parameter order"));
        }
        g.expect_same_shape(store.get(sid), "adam_step")?;
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter '{}'", store.param(sid).name)));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (id, g)) in grads.iter().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = store.get_mut(*id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g.data()[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.data()[i] * g.data()[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub classification: f64,
}

/// Forward, backward and Adam update on one batch.
pub fn train_step(model: &mut Model, batch: &Tensor, labels: &[usize], cfg: &TrainConfig, adam: &mut AdamState) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let (out, bn) = model.train_forward(&mut tape, &bound, batch)?;
    let l_rec = match out.recon {
        Some(r) => Some(reconstruction_loss(&mut tape, out.input, r)?),
        None => None,
    };
    let l_class = classification_loss(&mut tape, out.counts, labels, &cfg.class_weights)?;
    let total = total_loss(&mut tape, l_rec, l_class, cfg.gamma)?;
    let loss = StepLoss {
        total: tape.value(total).data()[0],
        reconstruction: l_rec.map_or(0.0, |r| tape.value(r).data()[0]),
        classification: tape.value(l_class).data()[0],
    };
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", loss.total)));
    }
    tape.backward(total)?;
    let grads = bound.grads(&tape, &model.store);
    adam_step(&mut model.store, &grads, adam, cfg.learning_rate)?;
    apply_bn_updates(&mut model.store, &bn);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub truths: Vec<usize>,
    pub counts: Vec<Vec<f64>>,
    pub macro_f1: f64,
}

/// Eval-mode predictions over `samples` in batches, batches in parallel.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize, timesteps: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty set"));
    }
    let chunks: Vec<&[Sample]> = samples.chunks(batch_size.max(1)).collect();
    let parts = parallel::map_slice(&chunks, |chunk| {
        let refs: Vec<&Tensor> = chunk.iter().map(|s| &s.data).collect();
        model.predict(&stack(&refs)?, timesteps)
    });
    let mut ev = Evaluation { predictions: Vec::new(), truths: Vec::new(), counts: Vec::new(), macro_f1: 0.0 };
    for p in parts {
        let p = p?;
        ev.predictions.extend(p.labels);
        ev.counts.extend(p.counts);
    }
    ev.truths = samples.iter().map(|s| s.label).collect();
    let classes = model.spec.classifier.classes;
    ev.macro_f1 = macro_f1(&ev.predictions, &ev.truths, classes)?;
    Ok(ev)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction_loss: f64,
    pub classification_loss: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub method: Method,
    pub config: TrainConfig,
    pub params: ParamCount,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stop_epoch: usize,
    pub wall_seconds: f64,
}

/// Trains `model` in place and leaves it at the best validation epoch.
pub fn fit(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    if cfg.class_weights.len() != model.spec.classifier.classes {
        return Err(Error::config(format!(
            "{} class weights for {} classes",
            cfg.class_weights.len(),
            model.spec.classifier.classes
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.named_tensors());
    let mut stale = 0usize;
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = StepLoss::default();
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &train[i].data).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let l = train_step(model, &stack(&refs)?, &labels, cfg, &mut adam)?;
            let w = idx.len() as f64;
            sum.total += l.total * w;
            sum.reconstruction += l.reconstruction * w;
            sum.classification += l.classification * w;
        }
        let n = train.len() as f64;
        let val_f1 = evaluate(model, val, cfg.batch_size, model.timesteps())?.macro_f1;
        let rec = EpochRecord {
            epoch,
            loss: sum.total / n,
            reconstruction_loss: sum.reconstruction / n,
            classification_loss: sum.classification / n,
            val_f1,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("{} epoch {epoch}: loss {:.5} val F1 {:.4}", model.method(), rec.loss, val_f1);
        epochs.push(rec);
        if val_f1 > best.0 {
            best = (val_f1, epoch, model.store.named_tensors());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    model.store.load_named(&best.2)?;
    Ok(TrainReport {
        method: model.method(),
        config: cfg.clone(),
        params: model.param_count(),
        stop_epoch: epochs.len(),
        epochs,
        best_epoch: best.1,
        best_val_f1: best.0,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
