use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then `lr·sqrt(warmup/step)`.
    WarmupInvSqrt { warmup: usize },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::WarmupInvSqrt { warmup } => {
                let w = warmup.max(1) as f64;
                let s = step.max(1) as f64;
                if s < w {
                    s / w
                } else {
                    (w / s).sqrt()
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
    /// Decoupled weight decay.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.5,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr, self.lr > 0.0),
            ("beta1", self.beta1, (0.0..1.0).contains(&self.beta1)),
            ("beta2", self.beta2, (0.0..1.0).contains(&self.beta2)),
            ("adam eps", self.eps, self.eps > 0.0),
            ("weight decay", self.weight_decay, self.weight_decay >= 0.0),
        ];
        for (what, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::Domain {
                    what,
                    value,
                    domain: "positive (betas in [0, 1))",
                });
            }
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Clips, then applies one bias-corrected Adam update. Returns the pre-clip
/// gradient norm.
pub fn adam_step(
    params: &mut ParamSet,
    mut grads: Vec<Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let norm = clip_global_norm(&mut grads, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let lr = cfg.lr * cfg.schedule.factor(state.step);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.tensors_mut()[i];
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!("gradient {i} has shape {:?}", g.shape())));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            if cfg.weight_decay > 0.0 {
                *pv -= lr * cfg.weight_decay * *pv;
            }
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use crate::rng::seeded;

    fn params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("a", &[3], Init::Normal(1.0), &mut seeded(1));
        ps.add("b", &[2, 2], Init::Normal(1.0), &mut seeded(2));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = params();
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let grads = ps.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut ps, grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = params();
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let grads = ps.tensors().iter().map(|t| Tensor::full(t.shape(), 0.3)).collect();
        adam_step(&mut ps, grads, &mut st, &cfg).unwrap();
        for (a, b) in ps.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) - 1e-4).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clipping_to_half() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        let pre = clip_global_norm(&mut g, 0.5);
        assert_eq!(pre, 5.0);
        assert!((global_norm(&g) - 0.5).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(vec![0.1])];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn schedule_shapes() {
        let s = LrSchedule::WarmupInvSqrt { warmup: 10 };
        assert_eq!(s.factor(5), 0.5);
        assert_eq!(s.factor(10), 1.0);
        assert_eq!(s.factor(40), 0.5);
        assert_eq!(LrSchedule::Constant.factor(1000), 1.0);
    }
}
