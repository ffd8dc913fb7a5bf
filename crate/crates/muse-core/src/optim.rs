//! Adam with bias correction, learning-rate schedules, gradient clipping,
//! and micro-batch gradient accumulation.

use crate::error::{MuseError, Result};
use crate::params::ParamStore;
use crate::tensor::Elem;

/// Per-parameter first/second moments and the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<Elem>>,
    v: Vec<Vec<Elem>>,
    pub t: usize,
    pub beta1: Elem,
    pub beta2: Elem,
    pub eps: Elem,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: Elem,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
/// Parameters without a gradient are treated as having gradient zero.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: Elem) -> Result<()> {
    if lr < 0.0 {
        return Err(MuseError::Usage("learning rate must be non-negative".into()));
    }
    store.check_finite_grads()?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let tensor = store.tensor_mut(id);
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        match &tensor.grad {
            Some(g) => {
                for i in 0..tensor.data.len() {
                    m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                    v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                }
            }
            None => {
                for i in 0..tensor.data.len() {
                    m[i] *= state.beta1;
                    v[i] *= state.beta2;
                }
            }
        }
        for i in 0..tensor.data.len() {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + state.eps);
            if state.weight_decay > 0.0 {
                update += lr * state.weight_decay * tensor.data[i];
            }
            tensor.data[i] -= update;
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: Elem) -> Elem {
    let mut sq = 0.0;
    for (_, t) in store.iter() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|&x| x * x).sum::<Elem>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = &mut store.tensor_mut(id).grad {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

// ── Schedules ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    InverseSqrt,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub warmup: usize,
    pub max_lr: Elem,
    pub min_lr: Elem,
    /// Total steps; used by the cosine decay only.
    pub total: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::InverseSqrt,
            warmup: 4000,
            max_lr: 1e-3,
            min_lr: 1e-7,
            total: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(MuseError::Config("warmup must be at least 1 step".into()));
        }
        if !(self.max_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(MuseError::Config(format!(
                "need max_lr > min_lr >= 0, got {} and {}",
                self.max_lr, self.min_lr
            )));
        }
        if self.kind == ScheduleKind::Cosine && self.total <= self.warmup {
            return Err(MuseError::Config("cosine schedule needs total > warmup".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Elem {
        match self.kind {
            ScheduleKind::InverseSqrt => lr_inverse_sqrt(step, self),
            ScheduleKind::Cosine => lr_cosine(step, self),
        }
    }
}

/// Linear warmup to `max_lr`, then inverse square-root decay. The peak is the
/// stated maximum rate itself, with no extra width-dependent factor.
pub fn lr_inverse_sqrt(step: usize, cfg: &ScheduleConfig) -> Elem {
    let s = step as Elem;
    let w = cfg.warmup as Elem;
    cfg.max_lr * (s / w).min((w / s).sqrt())
}

/// Linear warmup to `max_lr`, then cosine decay to `min_lr` at `total`.
pub fn lr_cosine(step: usize, cfg: &ScheduleConfig) -> Elem {
    let s = step as Elem;
    let w = cfg.warmup as Elem;
    if step <= cfg.warmup {
        return cfg.max_lr * s / w;
    }
    let progress = (s - w) / (cfg.total as Elem - w);
    let progress = progress.min(1.0);
    cfg.min_lr
        + (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI as Elem * progress).cos()) / 2.0
}

// ── Gradient accumulation ───────────────────────────────────────────────

/// Sums gradients over micro-batches; flushing divides by the count so one
/// optimizer step sees the mean gradient.
pub struct GradAccumulator {
    sums: Vec<Vec<Elem>>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            count: 0,
        }
    }

    /// Move the current gradients out of `store` into the running sums.
    pub fn add_from(&mut self, store: &mut ParamStore) {
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if let Some(g) = store.tensor_mut(id).grad.take() {
                for (s, gv) in self.sums[idx].iter_mut().zip(&g) {
                    *s += gv;
                }
            }
        }
        self.count += 1;
    }

    /// Write the mean gradient back into `store` and reset.
    pub fn flush_mean_into(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.count == 0 {
            return Err(MuseError::Usage("flushing an empty gradient accumulator".into()));
        }
        let inv = 1.0 / self.count as Elem;
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let mean: Vec<Elem> = self.sums[idx].iter().map(|&s| s * inv).collect();
            store.tensor_mut(id).grad = Some(mean);
            self.sums[idx].fill(0.0);
        }
        self.count = 0;
        Ok(())
    }
}
