//! Adam optimizer over named parameter tensors.
//!
//! State (step counter and both moment accumulators) is keyed by parameter
//! name so it can be serialized into the same named-tensor checkpoint format
//! as the models, which is what makes training resumption bit-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!(
                    "{} must be in [0, 1), got {}",
                    name, b
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected adaptive-moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. `params` and `grads` must align one-to-one by name
    /// and length; slots are created lazily on first sight of a name.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[(String, Vec<f64>)],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.config.beta2.powi(self.t as i32);
        for ((pname, tensor), (gname, grad)) in params.iter_mut().zip(grads.iter()) {
            if pname != gname {
                return Err(Error::Contract(format!(
                    "parameter '{}' paired with gradient '{}'",
                    pname, gname
                )));
            }
            if grad.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient for '{}' has {} entries, parameter has {}",
                    pname,
                    grad.len(),
                    tensor.numel()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for '{}' at optimizer step {}",
                    pname, self.t
                )));
            }
            let slot = self.slots.entry(pname.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if slot.m.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "optimizer state for '{}' has {} entries, gradient has {}",
                    pname,
                    slot.m.len(),
                    grad.len()
                )));
            }
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = self.config.beta1 * slot.m[i] + (1.0 - self.config.beta1) * g;
                slot.v[i] = self.config.beta2 * slot.v[i] + (1.0 - self.config.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.config.lr * m_hat / (v_hat.sqrt() + self.config.eps);
            }
        }
        Ok(())
    }

    /// Serialize the optimizer state as named tensors under `prefix`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{}.t", prefix),
            Tensor::new(vec![1], vec![self.t as f64]).expect("step count is finite"),
        )];
        for (name, slot) in &self.slots {
            out.push((
                format!("{}.m.{}", prefix, name),
                Tensor::from_parts(vec![slot.m.len()], slot.m.clone()),
            ));
            out.push((
                format!("{}.v.{}", prefix, name),
                Tensor::from_parts(vec![slot.v.len()], slot.v.clone()),
            ));
        }
        out
    }

    /// Restore state previously produced by `state_tensors` with the same
    /// prefix. Replaces the current state entirely.
    pub fn load_state_tensors(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let t_name = format!("{}.t", prefix);
        let m_prefix = format!("{}.m.", prefix);
        let v_prefix = format!("{}.v.", prefix);
        let mut t = None;
        let mut slots: BTreeMap<String, Slot> = BTreeMap::new();
        for (name, tensor) in tensors {
            if *name == t_name {
                t = Some(tensor.data()[0] as u64);
            } else if let Some(pname) = name.strip_prefix(&m_prefix) {
                slots
                    .entry(pname.to_string())
                    .or_insert_with(|| Slot { m: vec![], v: vec![] })
                    .m = tensor.data().to_vec();
            } else if let Some(pname) = name.strip_prefix(&v_prefix) {
                slots
                    .entry(pname.to_string())
                    .or_insert_with(|| Slot { m: vec![], v: vec![] })
                    .v = tensor.data().to_vec();
            } else {
                return Err(Error::Contract(format!(
                    "unexpected optimizer state tensor '{}'",
                    name
                )));
            }
        }
        let t = t.ok_or_else(|| {
            Error::Contract(format!("optimizer state missing step counter '{}'", t_name))
        })?;
        for (name, slot) in &slots {
            if slot.m.len() != slot.v.len() || slot.m.is_empty() {
                return Err(Error::Contract(format!(
                    "optimizer state for '{}' has mismatched moment lengths",
                    name
                )));
            }
        }
        self.t = t;
        self.slots = slots;
        Ok(())
    }
}
