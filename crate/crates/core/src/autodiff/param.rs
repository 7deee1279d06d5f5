use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 5e-4,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.lr > 0.0
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

/// Named parameters of one network together with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    name: String,
    params: Vec<Param>,
    frozen: bool,
    step_count: u64,
    skipped_steps: u64,
}

/// Tape handles for every parameter of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
            frozen: false,
            step_count: 0,
            skipped_steps: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Number of optimizer calls ignored because the set was frozen.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    /// Puts every parameter on the tape. Frozen sets become constants, so no
    /// gradient is ever computed for them.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let rg = !self.frozen;
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), rg))
                .collect(),
        }
    }

    /// Binds every parameter as a constant regardless of the freeze flag,
    /// for inference on a read-only snapshot.
    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Adds the tape gradients of a previous [`ParamSet::bind`] into the
    /// parameter gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "binding of {} params does not match set '{}' with {}",
                bound.vars.len(),
                self.name,
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update followed by zeroing the gradients.
    /// A frozen set is left untouched and the call is counted as skipped.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        if self.frozen {
            self.skipped_steps += 1;
            log::warn!("adam_step on frozen parameter set '{}' ignored", self.name);
            return;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                let m = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn restore_state(&mut self, step_count: u64) {
        self.step_count = step_count;
    }

    /// Bitwise snapshot of all parameter values, for freeze checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Free-function form of [`ParamSet::adam_step`].
pub fn adam_step(ps: &mut ParamSet, cfg: &AdamConfig) {
    ps.adam_step(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new("theta_T");
        ps.add("w", Tensor::scalar(value));
        ps.params_mut()[0].grad[0] = grad;
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = single(1.0, 1.0);
        ps.adam_step(&AdamConfig::default());
        let delta = ps.params()[0].value.data()[0] - 1.0;
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        assert!((delta + 5e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(ps.step_count(), 1);
        assert_eq!(ps.params()[0].grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut ps = single(0.25, 0.0);
        ps.adam_step(&AdamConfig::default());
        assert_eq!(ps.params()[0].value.data()[0], 0.25);
    }

    #[test]
    fn frozen_set_is_bit_identical() {
        let mut ps = single(0.3, 2.0);
        ps.freeze();
        let before = ps.fingerprint();
        ps.adam_step(&AdamConfig::default());
        assert_eq!(before, ps.fingerprint());
        assert_eq!(ps.skipped_steps(), 1);
        assert_eq!(ps.step_count(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
