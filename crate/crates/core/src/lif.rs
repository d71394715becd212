//! Discrete-time leaky integrate-and-fire neurons.
//!
//! Per step: `U[t] = β·U[t-1] + I[t] - θ·S[t-1]`, `S[t] = Θ(U[t] - θ)` with a
//! strict inequality, so a membrane sitting exactly on the threshold stays
//! silent. Reset is by subtraction. `β = sigmoid(beta_raw)` keeps the decay in
//! (0, 1); a learnable threshold is `softplus(theta_raw)` so it stays positive.
//! The forward pass is a true step function; the arctangent surrogate only
//! appears in gradients.

use std::f64::consts::PI;

use crate::autodiff::{membrane_update, heaviside, logit, sigmoid, softplus, softplus_inv, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Surrogate sharpness α.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateConfig {
    pub slope: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { slope: 2.0 }
    }
}

impl SurrogateConfig {
    pub fn new(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::config(format!("surrogate slope must be positive, got {slope}")));
        }
        Ok(Self { slope })
    }
}

/// `(α/2) / (1 + ((π/2)·α·x)²)`.
#[inline]
pub fn surrogate_scalar(x: f64, slope: f64) -> f64 {
    let z = 0.5 * PI * slope * x;
    0.5 * slope / (1.0 + z * z)
}

/// Surrogate derivative `∂S/∂U` evaluated at `U - θ`.
pub fn surrogate_grad(u_minus_theta: &Tensor, cfg: SurrogateConfig) -> Tensor {
    u_minus_theta.map(|x| surrogate_scalar(x, cfg.slope))
}

/// A stand-alone LIF layer carrying its own parameters and state; used for
/// simulation outside a training graph.
#[derive(Clone, Debug)]
pub struct LifLayer {
    pub name: String,
    pub beta_raw: f64,
    /// Raw threshold: `softplus(theta_raw)` when learnable, θ itself when frozen.
    pub theta_raw: f64,
    pub theta_frozen: bool,
    mem: Option<Tensor>,
    spk: Option<Tensor>,
}

impl LifLayer {
    pub fn new(name: impl Into<String>, beta: f64, theta: f64, theta_frozen: bool) -> Result<Self> {
        check_init(beta, theta)?;
        Ok(Self {
            name: name.into(),
            beta_raw: logit(beta),
            theta_raw: if theta_frozen { theta } else { softplus_inv(theta) },
            theta_frozen,
            mem: None,
            spk: None,
        })
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.beta_raw)
    }

    pub fn theta(&self) -> f64 {
        if self.theta_frozen {
            self.theta_raw
        } else {
            softplus(self.theta_raw)
        }
    }

    pub fn membrane(&self) -> Option<&Tensor> {
        self.mem.as_ref()
    }

    pub fn reset_state(&mut self) {
        self.mem = None;
        self.spk = None;
    }

    /// Advances one step and returns the binary spike tensor.
    pub fn step(&mut self, current: &Tensor) -> Result<Tensor> {
        let shape = current.shape();
        for (label, st) in [("membrane", &self.mem), ("spike", &self.spk)] {
            if let Some(s) = st {
                if s.shape() != shape {
                    return Err(Error::dim(
                        "lif_step",
                        format!("{} {label} state {:?} vs input {shape:?}", self.name, s.shape()),
                    ));
                }
            }
        }
        let zeros = Tensor::zeros(shape);
        let u_prev = self.mem.as_ref().unwrap_or(&zeros);
        let s_prev = self.spk.as_ref().unwrap_or(&zeros);
        let (beta, theta) = (self.beta(), self.theta());
        let u = Tensor::new(shape.to_vec(), membrane_update(u_prev.data(), s_prev.data(), current.data(), beta, theta))?;
        if !u.all_finite() {
            return Err(Error::Numeric(format!("non-finite membrane potential in layer {}", self.name)));
        }
        let s = u.map(|v| heaviside(v - theta));
        self.mem = Some(u);
        self.spk = Some(s.clone());
        Ok(s)
    }

    /// Runs `currents.len()` steps from the current state.
    pub fn sequence(&mut self, currents: &[Tensor]) -> Result<Vec<Tensor>> {
        if currents.is_empty() {
            return Err(Error::contract("lif_sequence needs at least one timestep"));
        }
        currents.iter().map(|c| self.step(c)).collect()
    }
}

fn check_init(beta: f64, theta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config(format!("LIF decay must lie in (0,1), got {beta}")));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::config(format!("LIF threshold must be positive, got {theta}")));
    }
    Ok(())
}

/// LIF neurons whose β/θ live in a [`ParamStore`], for use inside models.
#[derive(Clone, Debug)]
pub struct LifNeurons {
    pub name: String,
    pub beta: ParamId,
    pub theta: ParamId,
    pub theta_frozen: bool,
    pub surrogate: SurrogateConfig,
}

/// Membrane and previous spikes of one [`LifNeurons`] layer within a forward
/// pass. `Default` is the resting state.
#[derive(Clone, Copy, Debug, Default)]
pub struct LifState {
    mem: Option<Var>,
    spk: Option<Var>,
}

impl LifState {
    pub fn membrane(&self) -> Option<Var> {
        self.mem
    }
}

/// Effective β and θ handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LifVars {
    pub beta: Var,
    pub theta: Var,
}

impl LifNeurons {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        beta: f64,
        theta: f64,
        theta_frozen: bool,
        surrogate: SurrogateConfig,
    ) -> Result<Self> {
        check_init(beta, theta)?;
        let beta_id = store.add(format!("{name}.beta_raw"), Tensor::scalar(logit(beta)), ParamKind::Trainable);
        let theta_id = if theta_frozen {
            store.add(format!("{name}.theta"), Tensor::scalar(theta), ParamKind::Frozen)
        } else {
            store.add(format!("{name}.theta_raw"), Tensor::scalar(softplus_inv(theta)), ParamKind::Trainable)
        };
        Ok(Self { name: name.to_string(), beta: beta_id, theta: theta_id, theta_frozen, surrogate })
    }

    pub fn beta_value(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.beta).data()[0])
    }

    pub fn theta_value(&self, store: &ParamStore) -> f64 {
        let raw = store.get(self.theta).data()[0];
        if self.theta_frozen {
            raw
        } else {
            softplus(raw)
        }
    }

    /// Trainable scalar count (β, plus θ unless frozen).
    pub fn trainable_scalars(&self) -> usize {
        if self.theta_frozen {
            1
        } else {
            2
        }
    }

    pub fn vars(&self, tape: &mut Tape, bound: &Bound) -> LifVars {
        let beta = tape.sigmoid(bound.var(self.beta));
        let raw = bound.var(self.theta);
        let theta = if self.theta_frozen { raw } else { tape.softplus(raw) };
        LifVars { beta, theta }
    }

    /// One LIF step on the tape; returns the spike node.
    pub fn step(&self, tape: &mut Tape, v: LifVars, state: &mut LifState, current: Var) -> Result<Var> {
        let shape = tape.shape(current).to_vec();
        let mem = match state.mem {
            Some(m) => m,
            None => tape.constant(Tensor::zeros(&shape)),
        };
        let spk = match state.spk {
            Some(s) => s,
            None => tape.constant(Tensor::zeros(&shape)),
        };
        let u = tape.lif_membrane(mem, spk, current, v.beta, v.theta).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} in layer {}", self.name)),
            Error::Dimension { op, message } => Error::Dimension { op, message: format!("{}: {message}", self.name) },
            other => other,
        })?;
        let s = tape.spike(u, v.theta, self.surrogate.slope)?;
        state.mem = Some(u);
        state.spk = Some(s);
        Ok(s)
    }
}
