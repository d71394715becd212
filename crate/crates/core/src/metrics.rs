//! Evaluation and efficiency accounting.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamCount, ParamStore};
use crate::tensor::Tensor;

/// `n × n` confusion counts, rows = truth, columns = prediction.
pub fn confusion_matrix(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != truths.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::contract(format!("label {} out of range for {n_classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 (0/0 taken as 0); `None` for classes absent from both vectors.
pub fn per_class_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    let m = confusion_matrix(predictions, truths, n_classes)?;
    Ok((0..n_classes)
        .map(|c| {
            let tp = m[c][c] as f64;
            let actual: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|row| row[c]).sum();
            if actual == 0 && predicted == 0 {
                return None;
            }
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            Some(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 })
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes that occur in either vector.
pub fn macro_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::contract("macro F1 of an empty set"));
    }
    let f: Vec<f64> = per_class_f1(predictions, truths, n_classes)?.into_iter().flatten().collect();
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Fraction of exactly-zero elements.
pub fn sparsity(encoding: &Tensor) -> f64 {
    if encoding.is_empty() {
        return 1.0;
    }
    encoding.data().iter().filter(|&&v| v == 0.0).count() as f64 / encoding.len() as f64
}

/// Spiking activity of one LIF layer accumulated over a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerActivity {
    pub layer: String,
    /// Neuron-timesteps observed (neurons × batch × steps).
    pub neuron_steps: u64,
    pub spikes: u64,
}

/// Synaptic work of one layer application.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SynOp {
    /// Dense analog input: every connection costs a multiply-accumulate.
    Dense { layer: String, macs: u64 },
    /// Event-driven input: each nonzero input event costs `fan_out` accumulates.
    Event { layer: String, events: u64, fan_out: u64 },
}

/// Record of a forward pass for energy-proxy accounting.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModelTrace {
    pub layers: Vec<LayerActivity>,
    pub ops: Vec<SynOp>,
}

impl ModelTrace {
    pub fn record_spikes(&mut self, layer: &str, spikes: &Tensor) {
        let count = spikes.data().iter().filter(|&&v| v != 0.0).count() as u64;
        let n = spikes.len() as u64;
        match self.layers.iter_mut().find(|l| l.layer == layer) {
            Some(l) => {
                l.neuron_steps += n;
                l.spikes += count;
            }
            None => self.layers.push(LayerActivity { layer: layer.to_string(), neuron_steps: n, spikes: count }),
        }
    }

    pub fn record_dense(&mut self, layer: &str, macs: u64) {
        self.ops.push(SynOp::Dense { layer: layer.to_string(), macs });
    }

    pub fn record_events(&mut self, layer: &str, input: &Tensor, fan_out: u64) {
        let events = input.data().iter().filter(|&&v| v != 0.0).count() as u64;
        self.ops.push(SynOp::Event { layer: layer.to_string(), events, fan_out });
    }

    pub fn merge(&mut self, other: ModelTrace) {
        for l in other.layers {
            match self.layers.iter_mut().find(|x| x.layer == l.layer) {
                Some(x) => {
                    x.neuron_steps += l.neuron_steps;
                    x.spikes += l.spikes;
                }
                None => self.layers.push(l),
            }
        }
        self.ops.extend(other.ops);
    }
}

/// Percentage of neuron-timesteps carrying a spike, over all LIF layers.
pub fn spike_rate(trace: &ModelTrace) -> Result<f64> {
    let steps: u64 = trace.layers.iter().map(|l| l.neuron_steps).sum();
    if steps == 0 {
        return Err(Error::contract("spike rate of an empty trace"));
    }
    let spikes: u64 = trace.layers.iter().map(|l| l.spikes).sum();
    Ok(100.0 * spikes as f64 / steps as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SynapticOps {
    pub acc_ops: u64,
    pub mac_ops: u64,
}

pub fn count_synaptic_ops(trace: &ModelTrace) -> SynapticOps {
    let mut out = SynapticOps::default();
    for op in &trace.ops {
        match op {
            SynOp::Dense { macs, .. } => out.mac_ops += macs,
            SynOp::Event { events, fan_out, .. } => out.acc_ops += events * fan_out,
        }
    }
    out
}

pub fn count_params(store: &ParamStore) -> ParamCount {
    store.count()
}

/// Mean wall-clock milliseconds of `repeats` calls to `f`.
pub fn time_inference<T>(repeats: usize, mut f: impl FnMut() -> T) -> f64 {
    let repeats = repeats.max(1);
    let mut total = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f());
        total += start.elapsed().as_secs_f64() * 1e3;
    }
    total / repeats as f64
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (intercept + slope * a)).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (slope, intercept, 1.0 - ss_res / ss_tot)
}
