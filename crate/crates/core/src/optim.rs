//! AdamW, weight EMA and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moments are indexed like the store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        AdamW { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update of every parameter in an `update`-selected group that has
    /// a gradient. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, update: impl Fn(ParamGroup) -> bool) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let entry = store.get_mut(id);
            if !update(entry.group) {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let p = &mut entry.data[k];
                *p -= lr * c.weight_decay * *p;
                *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`.
pub fn ema_update(shadow: &mut ParamStore, live: &ParamStore, decay: f64) {
    debug_assert!(shadow.same_layout(live));
    let ids: Vec<_> = live.iter().map(|(id, _)| id).collect();
    for id in ids {
        let src = &live.get(id).data;
        let dst = &mut shadow.get_mut(id).data;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = decay * *d + (1.0 - decay) * s;
        }
    }
}

/// Multiplier on the peak rate: linear from 0 over `warmup` steps, then
/// half-cosine down to 0 at `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    #[test]
    fn schedule_endpoints() {
        let (total, warmup) = (1000, 50);
        assert_eq!(warmup_cosine(0, total, warmup), 0.0);
        assert_eq!(warmup_cosine(warmup, total, warmup), 1.0);
        assert!(warmup_cosine(total, total, warmup) <= 1e-2);
        assert!((warmup_cosine(25, total, warmup) - 0.5).abs() < 1e-15);
        for s in warmup..total {
            assert!(warmup_cosine(s + 1, total, warmup) <= warmup_cosine(s, total, warmup));
        }
    }

    #[test]
    fn ema_starts_equal_and_converges() {
        let mut live = ParamStore::new();
        live.add("w", &[3], vec![1.0, -2.0, 0.5], ParamGroup::Backbone);
        let mut shadow = live.clone();
        assert_eq!(shadow.get(ParamId(0)).data, live.get(ParamId(0)).data);
        live.get_mut(ParamId(0)).data = vec![0.0, 0.0, 0.0];
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            ema_update(&mut shadow, &live, 0.9);
            let d: f64 = shadow.get(ParamId(0)).data.iter().map(|v| v.abs()).sum();
            assert!(d < last);
            last = d;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn adamw_first_step_and_decay() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![1.0, -1.0], ParamGroup::Backbone);
        let frozen = store.add("f", &[1], vec![3.0], ParamGroup::Frozen);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }, &store);
        let mut g = Gradients::default();
        g.accumulate(id, &[0.5, -4.0], 1.0);
        g.accumulate(frozen, &[1.0], 1.0);
        opt.step(&mut store, &g, 0.1, |grp| grp != ParamGroup::Frozen);
        // Bias-corrected first step moves each coordinate by ~lr * sign(g).
        let w = &store.get(id).data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert_eq!(store.get(frozen).data, vec![3.0]);
        // Pure decay with zero gradient.
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() }, &store);
        let mut g = Gradients::default();
        g.accumulate(id, &[0.0, 0.0], 1.0);
        let before = store.get(id).data.clone();
        opt.step(&mut store, &g, 0.1, |_| true);
        for (a, b) in store.get(id).data.iter().zip(before) {
            assert!((a - 0.95 * b).abs() < 1e-12);
        }
    }
}
