//! Synthetic conditional screens: Gaussian outcomes per perturbation with
//! per-context offsets and scales.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::coupling::ControlPool;
use crate::error::{Error, Result};
use crate::model::CondLabels;
use crate::rng::seeded;

/// Perturbation id of the untreated control.
pub const CONTROL: usize = 0;

/// Features handed to an adaptor in place of the true embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PhiKind {
    /// `μ_p + noise·η`, a fresh `η` per draw.
    Informative { noise: f64 },
    /// Standard normal noise of the same width, unrelated to the perturbation.
    Uninformative,
}

impl Default for PhiKind {
    fn default() -> Self {
        Self::Informative { noise: 0.0 }
    }
}

/// Knobs from which a [`ScreenSpec`] is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenConfig {
    pub dim: usize,
    /// Perturbation count including the control.
    pub n_pert: usize,
    pub n_ctx: usize,
    /// Standard deviation of the perturbation means.
    #[serde(default = "default_effect")]
    pub effect_scale: f64,
    /// Standard deviation of the context offsets.
    #[serde(default)]
    pub batch_offset: f64,
    /// Standard deviation of the log context scales.
    #[serde(default)]
    pub batch_log_scale: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub holdout: Vec<usize>,
    #[serde(default)]
    pub phi: PhiKind,
    /// Force context 0 to have no offset and unit scale.
    #[serde(default)]
    pub neutral_context: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_effect() -> f64 {
    2.0
}

fn default_sigma() -> f64 {
    0.5
}

impl ScreenConfig {
    pub fn new(dim: usize, n_pert: usize, n_ctx: usize, seed: u64) -> Self {
        Self {
            dim,
            n_pert,
            n_ctx,
            effect_scale: default_effect(),
            batch_offset: 0.0,
            batch_log_scale: 0.0,
            sigma: default_sigma(),
            holdout: Vec::new(),
            phi: PhiKind::default(),
            neutral_context: false,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenSpec {
    pub dim: usize,
    /// `μ_p`, row 0 is the control and is zero.
    pub means: Vec<Vec<f64>>,
    /// `b_e`.
    pub offsets: Vec<Vec<f64>>,
    /// `s_e`, elementwise positive.
    pub scales: Vec<Vec<f64>>,
    pub sigma: f64,
    pub holdout: Vec<usize>,
    pub phi: PhiKind,
}

impl ScreenSpec {
    pub fn from_config(cfg: &ScreenConfig) -> Result<Self> {
        let mut rng = seeded(cfg.seed);
        let d = cfg.dim;
        let mut draw = |sd: f64| -> Vec<f64> { (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        let mut means = vec![vec![0.0; d]];
        for _ in 1..cfg.n_pert {
            means.push(draw(cfg.effect_scale));
        }
        let mut offsets = Vec::with_capacity(cfg.n_ctx);
        let mut scales = Vec::with_capacity(cfg.n_ctx);
        for e in 0..cfg.n_ctx {
            let b = draw(cfg.batch_offset);
            let s: Vec<f64> = draw(cfg.batch_log_scale).into_iter().map(f64::exp).collect();
            if e == 0 && cfg.neutral_context {
                offsets.push(vec![0.0; d]);
                scales.push(vec![1.0; d]);
            } else {
                offsets.push(b);
                scales.push(s);
            }
        }
        let spec = Self {
            dim: d,
            means,
            offsets,
            scales,
            sigma: cfg.sigma,
            holdout: cfg.holdout.clone(),
            phi: cfg.phi,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 || self.means.is_empty() || self.offsets.is_empty() {
            return Err(Error::Contract(
                "screen needs positive dim, perturbations and contexts".into(),
            ));
        }
        if self
            .means
            .iter()
            .chain(&self.offsets)
            .chain(&self.scales)
            .any(|r| r.len() != d)
            || self.scales.len() != self.offsets.len()
        {
            return Err(Error::Contract("screen parameter widths disagree".into()));
        }
        if self.means[CONTROL].iter().any(|&m| m != 0.0) {
            return Err(Error::Contract("control mean must be zero".into()));
        }
        if self.scales.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract("context scales must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Domain {
                what: "sigma",
                value: self.sigma,
                domain: "[0, ∞)",
            });
        }
        if let Some(&h) = self.holdout.iter().find(|&&h| h == CONTROL || h >= self.n_pert()) {
            return Err(Error::Contract(format!("holdout id {h} is not a treated perturbation")));
        }
        if let PhiKind::Informative { noise } = self.phi {
            if !(noise >= 0.0) {
                return Err(Error::Domain {
                    what: "phi noise",
                    value: noise,
                    domain: "[0, ∞)",
                });
            }
        }
        Ok(())
    }

    pub fn n_pert(&self) -> usize {
        self.means.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_holdout(&self, p: usize) -> bool {
        self.holdout.contains(&p)
    }

    /// Treated perturbations outside the holdout set.
    pub fn seen(&self) -> Vec<usize> {
        (1..self.n_pert()).filter(|p| !self.is_holdout(*p)).collect()
    }

    fn check_ids(&self, p: usize, e: usize) -> Result<()> {
        if p >= self.n_pert() || e >= self.n_ctx() {
            return Err(Error::Contract(format!(
                "ids (perturbation {p}, context {e}) outside {} × {}",
                self.n_pert(),
                self.n_ctx()
            )));
        }
        Ok(())
    }

    /// `s_e ⊙ μ_p + b_e`.
    pub fn mean(&self, p: usize, e: usize) -> Result<Vec<f64>> {
        self.check_ids(p, e)?;
        Ok((0..self.dim)
            .map(|j| self.scales[e][j] * self.means[p][j] + self.offsets[e][j])
            .collect())
    }

    /// Per-coordinate standard deviation `σ·s_e`.
    pub fn std(&self, e: usize) -> Result<Vec<f64>> {
        self.check_ids(CONTROL, e)?;
        Ok(self.scales[e].iter().map(|s| s * self.sigma).collect())
    }

    /// Feature vector for perturbation `p`.
    pub fn phi<R: Rng + ?Sized>(&self, p: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_ids(p, 0)?;
        Ok(match self.phi {
            PhiKind::Informative { noise } => self.means[p]
                .iter()
                .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            PhiKind::Uninformative => (0..self.dim).map(|_| rng.sample(StandardNormal)).collect(),
        })
    }
}

/// `n` draws of `s_e ⊙ (μ_p + σ·ε) + b_e`.
pub fn sample_screen<R: Rng + ?Sized>(spec: &ScreenSpec, p: usize, e: usize, n: usize, rng: &mut R) -> Result<Tensor> {
    spec.check_ids(p, e)?;
    if n == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    let d = spec.dim;
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            out.push(spec.scales[e][j] * (spec.means[p][j] + spec.sigma * eps) + spec.offsets[e][j]);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// `n_per` samples for every `(perturbation, context)` pair, with labels.
pub fn sample_conditions<R: Rng + ?Sized>(
    spec: &ScreenSpec,
    perts: &[usize],
    contexts: &[usize],
    n_per: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<CondLabels>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for &p in perts {
        for &e in contexts {
            parts.push(sample_screen(spec, p, e, n_per, rng)?);
            labels.extend(std::iter::repeat_n(CondLabels::new(p, e), n_per));
        }
    }
    if parts.is_empty() {
        return Err(Error::Contract("no conditions requested".into()));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat_rows(&refs)?, labels))
}

/// `per_context` control samples from every context.
pub fn control_pool<R: Rng + ?Sized>(spec: &ScreenSpec, per_context: usize, rng: &mut R) -> Result<ControlPool> {
    let mut pool = ControlPool::new();
    for e in 0..spec.n_ctx() {
        let x = sample_screen(spec, CONTROL, e, per_context, rng)?;
        for i in 0..per_context {
            pool.insert(e, x.row(i).to_vec());
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_batch_effects_make_contexts_identical() {
        let spec = ScreenSpec::from_config(&ScreenConfig::new(3, 4, 3, 1)).unwrap();
        for e in 1..3 {
            assert_eq!(spec.mean(2, e).unwrap(), spec.mean(2, 0).unwrap());
            assert_eq!(spec.std(e).unwrap(), spec.std(0).unwrap());
        }
    }

    #[test]
    fn invalid_ids_are_contract_errors() {
        let spec = ScreenSpec::from_config(&ScreenConfig::new(2, 3, 2, 0)).unwrap();
        let mut rng = seeded(0);
        assert!(matches!(
            sample_screen(&spec, 3, 0, 5, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            sample_screen(&spec, 0, 2, 5, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn holdout_must_be_treated() {
        let mut cfg = ScreenConfig::new(2, 3, 1, 0);
        cfg.holdout = vec![0];
        assert!(ScreenSpec::from_config(&cfg).is_err());
        cfg.holdout = vec![2];
        assert_eq!(ScreenSpec::from_config(&cfg).unwrap().seen(), vec![1]);
    }

    #[test]
    fn noiseless_phi_is_the_mean() {
        let spec = ScreenSpec::from_config(&ScreenConfig::new(4, 3, 1, 2)).unwrap();
        assert_eq!(spec.phi(2, &mut seeded(0)).unwrap(), spec.means[2]);
    }
}
