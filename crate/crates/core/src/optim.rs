//! Adam with global-norm gradient clipping, plus the named gradient buffer
//! batches accumulate into.

use indexmap::IndexMap;

use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter gradient sums keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradBatch {
    map: IndexMap<String, Tensor>,
}

impl GradBatch {
    /// One zero tensor per parameter, in store order.
    pub fn zeros_like(ps: &ParamStore) -> GradBatch {
        GradBatch {
            map: ps
                .iter()
                .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Adds the adjoints of every bound parameter that joined the graph.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, val) in bound.iter() {
            let Some(g) = grads.get(val) else { continue };
            let slot = self.map.get_mut(name).ok_or_else(|| {
                CoreError::config(format!("gradient for unknown parameter {name}"))
            })?;
            if slot.shape() != g.shape() {
                return Err(CoreError::shape(
                    "grad_accumulate",
                    format!("{name}: {:?} vs {:?}", slot.shape(), g.shape()),
                ));
            }
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Elementwise sum with another batch (for merging worker shards).
    pub fn add(&mut self, other: &GradBatch) {
        for (name, t) in &other.map {
            if let Some(slot) = self.map.get_mut(name) {
                for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Errors with the first offending parameter name.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.map {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::numeric(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
        }
        Ok(())
    }

    /// In-place global-norm clipping; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Adam optimizer state; moments are keyed by parameter name so saving and
/// reloading the parameter store does not disturb them.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub clip_norm: f64,
    step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: f64) -> Adam {
        Adam {
            lr,
            clip_norm,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips, validates, and applies one update. Returns the pre-clip
    /// gradient norm. A non-finite gradient aborts before any parameter is
    /// touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut GradBatch) -> Result<f64> {
        grads.check_finite()?;
        let norm = grads.clip_global_norm(self.clip_norm);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.map.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            for i in 0..value.len() {
                let gi = g.data()[i];
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(norm)
    }
}
