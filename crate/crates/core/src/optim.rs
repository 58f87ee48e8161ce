//! Adam with bias correction over named parameters.

use indexmap::IndexMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter. Call once per optimizer step, before the
    /// per-store [`Adam::apply`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates every parameter of `params` that has an entry in `grads`.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.numel() {
                return Err(TensorError::Contract(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    g.len(),
                    p.numel()
                ))
                .into());
            }
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// One full step over a single store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        self.begin_step();
        self.apply(params, grads)
    }
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Vec<f64>>, max_norm: f64) -> f64 {
    let grads: Vec<&mut Vec<f64>> = grads.into_iter().collect();
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
