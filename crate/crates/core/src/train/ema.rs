use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Relative standard deviation of the averaging profile `t^γ` on `[0, 1]`.
pub fn sigma_rel_of_gamma(gamma: f64) -> f64 {
    ((gamma + 1.0) / ((gamma + 2.0).powi(2) * (gamma + 3.0))).sqrt()
}

/// Solves `σ_rel² = (γ+1)/((γ+2)²(γ+3))` for `γ ≥ 0` by bisection.
pub fn gamma_from_sigma_rel(sigma_rel: f64) -> Result<f64> {
    let max = sigma_rel_of_gamma(0.0);
    if !(sigma_rel > 0.0 && sigma_rel <= max) {
        return Err(Error::Domain {
            what: "ema sigma_rel",
            value: sigma_rel,
            domain: "(0, 1/sqrt(12)]",
        });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while sigma_rel_of_gamma(hi) > sigma_rel {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sigma_rel_of_gamma(mid) > sigma_rel {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Online power-function average of a parameter trajectory.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub gamma: f64,
    pub step: usize,
    pub params: ParamSet,
}

impl EmaState {
    pub fn new(sigma_rel: f64, init: &ParamSet) -> Result<Self> {
        Ok(Self {
            gamma: gamma_from_sigma_rel(sigma_rel)?,
            step: 0,
            params: init.clone(),
        })
    }

    /// `β_t = (1 − 1/t)^(γ+1)`.
    pub fn beta(&self, t: usize) -> f64 {
        (1.0 - 1.0 / t as f64).powf(self.gamma + 1.0)
    }

    /// Folds in the live parameters after optimizer step `t ≥ 1`.
    pub fn update(&mut self, live: &ParamSet, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Contract("ema update needs step t ≥ 1".into()));
        }
        let beta = self.beta(t);
        for (e, l) in self.params.tensors_mut().iter_mut().zip(live.tensors()) {
            for (ev, &lv) in e.data_mut().iter_mut().zip(l.data()) {
                *ev = beta * *ev + (1.0 - beta) * lv;
            }
        }
        self.step = t;
        Ok(())
    }
}
