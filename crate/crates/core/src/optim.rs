//! SGD with momentum, cosine learning-rate decay, and weight EMA.

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// One step: `v = m*v + (g + wd*w)`, `w -= lr*v`. Weight decay applies
    /// to weight tensors (`*.w`) only. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let wd = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut().iter_mut()) {
                *vi = self.momentum * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear ramp over the first `warmup` steps, then cosine decay over the rest.
pub fn warmup_cosine_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(base, step - warmup, total.saturating_sub(warmup))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_inplace(c));
    }
    norm
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    /// Caps the decay at `(1 + n) / (10 + n)` after `n` updates.
    pub warmup: bool,
    updates: usize,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64, warmup: bool) -> Self {
        Self { decay, warmup, updates: 0, shadow: params.clone() }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &ParamStore) {
        let d = self.effective_decay();
        for (name, s) in self.shadow.iter_mut() {
            if let Some(w) = params.get(name) {
                for (si, wi) in s.data_mut().iter_mut().zip(w.data()) {
                    *si = d * *si + (1.0 - d) * wi;
                }
            }
        }
        self.updates += 1;
    }

    pub fn params(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn into_params(self) -> ParamStore {
        self.shadow
    }
}
