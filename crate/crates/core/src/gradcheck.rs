//! Central finite-difference gradient checking.

use std::collections::HashSet;

use crate::autodiff::{OpKind, SpikeForward, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Below this magnitude errors are measured absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Non-differentiable ops the caller accepts in `f`. A listed `Spike` op
    /// is evaluated with its smooth arctangent forward so that finite
    /// differences see exactly the surrogate derivative.
    pub exclude: Vec<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, exclude: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
    /// Set when the check could not be carried out meaningfully.
    pub diagnostic: Option<String>,
}

/// Compares `d f(x) / d x` from the tape with central differences.
///
/// `f` receives a fresh tape and the leaf for `x` and must return a scalar node.
pub fn grad_check<F>(mut f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let excluded: HashSet<OpKind> = opts.exclude.iter().copied().collect();
    let mode = if excluded.contains(&OpKind::Spike) { SpikeForward::Smooth } else { SpikeForward::Heaviside };

    let mut tape = Tape::with_spike_forward(mode);
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let blocked: Vec<OpKind> = tape
        .kinds()
        .filter(|k| matches!(k, OpKind::Spike | OpKind::Bipolar) && !excluded.contains(k))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if !blocked.is_empty() {
        return Ok(failure(format!(
            "function contains step-like ops {blocked:?}; finite differences are zero almost everywhere"
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.all_finite() {
        return Ok(failure("analytic gradient is not finite".into()));
    }

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::with_spike_forward(mode);
        let v = t.leaf(probe, false);
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0])
    };

    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !(fp.is_finite() && fm.is_finite()) {
            return Ok(failure(format!("non-finite function value when perturbing element {i}")));
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport { max_rel_error: worst.0, worst_index: worst.1, passed: worst.0 <= opts.tol, diagnostic: None })
}

fn failure(msg: String) -> GradCheckReport {
    GradCheckReport { max_rel_error: f64::INFINITY, worst_index: 0, passed: false, diagnostic: Some(msg) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -3.0, 2.25]);
        let r = grad_check(|t: &mut Tape, v| Ok(t.sum(v)), &x, &GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn heaviside_requires_exclusion() {
        let x = Tensor::from_vec(vec![0.3, 1.7, -0.2]);
        let f = |t: &mut Tape, v: Var| {
            let th = t.constant(Tensor::scalar(1.0));
            let s = t.spike(v, th, 2.0)?;
            Ok(t.sum(s))
        };
        let r = grad_check(f, &x, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert!(r.diagnostic.is_some());

        let opts = GradCheckOptions { exclude: vec![OpKind::Spike], ..Default::default() };
        let r = grad_check(f, &x, &opts).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::from_vec(vec![1e308, 1e308]);
        let f = |t: &mut Tape, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let r = grad_check(f, &x, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert!(r.diagnostic.is_some());
    }
}
