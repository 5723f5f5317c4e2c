//! Named parameter sets and the adaptive-moment optimizer shared by toy
//! training and post-optimization. Gradients come from [`crate::tape`];
//! this module owns the state that persists across steps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    /// Training default step size; post-optimization overrides it.
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain(format!(
                "optimizer betas must lie in [0, 1): got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Domain("optimizer eps must be positive".into()));
        }
        Ok(())
    }
}

/// Index of one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// One named parameter tensor with its gradient and moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
    ) -> Result<ParamId> {
        if value.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "param `{name}`: data length {} does not match {rows}x{cols}",
                value.len()
            )));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Domain(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.tensors.push(ParamTensor {
            name: name.into(),
            rows,
            cols,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// One bias-corrected adaptive-moment update over every tensor.
    pub fn adam_step(&mut self, cfg: &OptimConfig) -> Result<()> {
        cfg.validate()?;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - fmath::powf(cfg.beta1, t);
        let bc2 = 1.0 - fmath::powf(cfg.beta2, t);
        for tensor in &mut self.tensors {
            for i in 0..tensor.value.len() {
                let g = tensor.grad[i];
                tensor.m[i] = cfg.beta1 * tensor.m[i] + (1.0 - cfg.beta1) * g;
                tensor.v[i] = cfg.beta2 * tensor.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = tensor.m[i] / bc1;
                let v_hat = tensor.v[i] / bc2;
                tensor.value[i] -= cfg.step_size * m_hat / (fmath::sqrt(v_hat) + cfg.eps);
                if !tensor.value[i].is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite update for parameter `{}` at element {i} (step {})",
                        tensor.name, self.step
                    )));
                }
            }
        }
        Ok(())
    }
}
