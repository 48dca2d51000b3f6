use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// AdamW with decoupled weight decay.
///
/// Moments are created lazily the first time a trainable parameter is
/// stepped. Frozen parameters are skipped entirely: neither their values
/// nor their moments change.
pub struct AdamW {
    cfg: AdamWConfig,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        let c = self.cfg;
        for (id, g) in grads {
            let id = *id;
            if !store.is_trainable(id) {
                continue;
            }
            if g.shape() != store.value(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = g.numel();
            let st = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if st.m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![st.m.len()],
                    rhs: vec![n],
                });
            }
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let wd = if store.decays(id) { c.weight_decay } else { 0.0 };
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + c.eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients; rescales them in place when it exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            let s = max / norm;
            for (_, g) in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}

/// Linear warmup followed by cosine decay towards zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let total = total.max(1);
    let warmup = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.add("a/w", Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap(), true);
        let b = s.add("b/w", Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap(), true);
        (s, a, b)
    }

    #[test]
    fn frozen_parameter_bytes_and_moments_unchanged() {
        let (mut s, a, b) = store();
        s.set_group_trainable("b", false);
        let before = s.value(b).clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        for _ in 0..5 {
            opt.step(&mut s, &[(a, g.clone()), (b, g.clone())], 1e-2).unwrap();
        }
        assert!(s.value(b).bit_eq(&before));
        assert!(!opt.has_moments(b));
        assert!(opt.has_moments(a));
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut s = ParamStore::new();
        let a = s.add("a/b", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = Tensor::matrix(1, 2, vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[(a, g)], 0.1).unwrap();
        let v = s.value(a).data();
        assert!((v[0] + 0.1).abs() < 1e-7);
        assert!((v[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn decay_only_where_flagged() {
        let mut s = ParamStore::new();
        let w = s.add("a/w", Tensor::scalar(2.0), true);
        let b = s.add("a/b", Tensor::scalar(2.0), false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let z = Tensor::scalar(0.0);
        opt.step(&mut s, &[(w, z.clone()), (b, z)], 0.5).unwrap();
        assert!((s.value(w).item() - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-12);
        assert_eq!(s.value(b).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut s, a, _) = store();
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = Tensor::scalar(1.0);
        assert!(opt.step(&mut s, &[(a, g)], 0.1).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![(ParamId(0), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())];
        let n = clip_global_norm(&mut g, Some(1.0));
        assert_eq!(n, 5.0);
        assert!((g[0].1.sum_sq().sqrt() - 1.0).abs() < 1e-12);
        let n2 = clip_global_norm(&mut g, None);
        assert!((n2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let base = 1e-4;
        assert!(cosine_lr(base, 0, 100, 0.05) < base);
        assert!((cosine_lr(base, 4, 100, 0.05) - base).abs() < 1e-18);
        assert!((cosine_lr(base, 5, 100, 0.05) - base).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 5..100 {
            let lr = cosine_lr(base, s, 100, 0.05);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }
}
