//! Interpolation paths between a source sample `x0` and a target sample `x1`.
//!
//! Each path is written as `x_t = a(t)·x1 + b(t)·x0 + c(t)·ε` and the
//! regression target is its time derivative at fixed `(x0, x1, ε)`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Lower time clamp used when training on the Brownian bridge, whose
/// velocity is singular at both endpoints.
pub const BRIDGE_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Interpolant {
    Linear,
    VariancePreserving,
    BrownianBridge { k: f64 },
}

/// A time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Time(f64);

impl Time {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "[0, 1]",
            });
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Interpolant {
    pub fn validate(&self) -> Result<()> {
        if let Self::BrownianBridge { k } = *self {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Domain {
                    what: "bridge noise scale k",
                    value: k,
                    domain: "(0, ∞)",
                });
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::VariancePreserving => "vp".into(),
            Self::BrownianBridge { k } => format!("bb_k{k}"),
        }
    }

    /// Whether the path uses the noise tensor `ε`.
    pub fn uses_noise(&self) -> bool {
        matches!(self, Self::BrownianBridge { .. })
    }

    /// Half-width of the excluded region at each end of the training time range.
    pub fn t_min(&self) -> f64 {
        match self {
            Self::BrownianBridge { .. } => BRIDGE_T_MIN,
            _ => 0.0,
        }
    }

    /// Training time `t ~ Uniform(t_min, 1 - t_min)`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> Time {
        let lo = self.t_min();
        Time(lo + (1.0 - 2.0 * lo) * rng.random::<f64>())
    }

    /// `(a, b, c)` with `x_t = a·x1 + b·x0 + c·ε`.
    pub fn coefficients(&self, t: Time) -> (f64, f64, f64) {
        let t = t.0;
        match *self {
            Self::Linear => (t, 1.0 - t, 0.0),
            // cos(π/2) rounds to 6e-17; pin the endpoint so x_1 is reproduced exactly.
            Self::VariancePreserving if t == 1.0 => (1.0, 0.0, 0.0),
            Self::VariancePreserving => ((FRAC_PI_2 * t).sin(), (FRAC_PI_2 * t).cos(), 0.0),
            Self::BrownianBridge { k } => (t, 1.0 - t, k * (2.0 * t * (1.0 - t)).sqrt()),
        }
    }

    /// Time derivatives `(a', b', c')` of [`Interpolant::coefficients`].
    pub fn coefficient_rates(&self, t: Time) -> Result<(f64, f64, f64)> {
        let t = t.0;
        Ok(match *self {
            Self::Linear => (1.0, -1.0, 0.0),
            Self::VariancePreserving => (
                FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
                -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
                0.0,
            ),
            Self::BrownianBridge { k } => {
                if t <= 0.0 || t >= 1.0 {
                    return Err(Error::Singularity(format!("bridge velocity is unbounded at t = {t}")));
                }
                (1.0, -1.0, k * (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)).sqrt())
            }
        })
    }

    pub fn interpolate(&self, x0: &Tensor, x1: &Tensor, t: Time, eps: &Tensor) -> Result<Tensor> {
        self.check(x0, x1, eps)?;
        let (a, b, c) = self.coefficients(t);
        Ok(combine(a, x1, b, x0, c, eps))
    }

    pub fn target_velocity(&self, x0: &Tensor, x1: &Tensor, t: Time, eps: &Tensor) -> Result<Tensor> {
        self.check(x0, x1, eps)?;
        let (a, b, c) = self.coefficient_rates(t)?;
        Ok(combine(a, x1, b, x0, c, eps))
    }

    fn check(&self, x0: &Tensor, x1: &Tensor, eps: &Tensor) -> Result<()> {
        self.validate()?;
        if x0.shape() != x1.shape() || x0.shape() != eps.shape() {
            return Err(shape_err(
                "interpolant",
                format!("x0 {:?}, x1 {:?}, eps {:?}", x0.shape(), x1.shape(), eps.shape()),
            ));
        }
        Ok(())
    }
}

fn combine(a: f64, x1: &Tensor, b: f64, x0: &Tensor, c: f64, eps: &Tensor) -> Tensor {
    let data: Vec<f64> = x1
        .data()
        .iter()
        .zip(x0.data())
        .zip(eps.data())
        .map(|((&p, &q), &e)| {
            // Skipping the zero term keeps endpoint identities exact.
            let mut v = a * p + b * q;
            if c != 0.0 {
                v += c * e;
            }
            v
        })
        .collect();
    Tensor::new(x1.shape().to_vec(), data).expect("shape preserved")
}
