//! Embedding-error bound on a Gaussian family.
//!
//! The true generator is `H(e) = N(e, I)`, so `W₂(H(e₁), H(e₂)) = ‖e₁ − e₂‖`
//! and `U = 1`. The learned generator is
//! `H̃(e) = N(e + b ⊙ sin e, (1 + α)² I)`; its worst-case distance from `H`
//! over all `e` is `ε_base = sqrt(‖b‖² + d·α²)`. An encoder `G = e* + δ`
//! stands in for the perturbation encoder. The bound under test is
//! `W₂(H(e*), H̃(G)) ≤ ε_base + U·‖e* − G‖`.

use nalgebra::{DMatrix, DVector};
use phenoflow_core::metrics::{frechet_from_stats, mean_cov, sqrtm_psd};
use phenoflow_core::rng::stream;
use phenoflow_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{num, streams};
use crate::artifacts::{Csv, OutDir};
use crate::config::BoundConfig;
use crate::{CliError, Result, RunConfig};

/// One random instance of the family.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub e_star: Vec<f64>,
    pub delta: Vec<f64>,
    /// Mean distortion amplitudes `b`.
    pub b: Vec<f64>,
    /// Standard-deviation inflation `α`.
    pub alpha: f64,
}

impl Instance {
    pub fn dim(&self) -> usize {
        self.e_star.len()
    }

    pub fn g(&self) -> Vec<f64> {
        self.e_star.iter().zip(&self.delta).map(|(e, d)| e + d).collect()
    }

    pub fn eps_base(&self) -> f64 {
        (self.b.iter().map(|b| b * b).sum::<f64>() + self.dim() as f64 * self.alpha * self.alpha).sqrt()
    }

    pub fn encoder_error(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Mean of `H̃(e)`.
    pub fn learned_mean(&self, e: &[f64]) -> Vec<f64> {
        e.iter().zip(&self.b).map(|(e, b)| e + b * e.sin()).collect()
    }

    pub fn learned_std(&self) -> f64 {
        1.0 + self.alpha
    }

    /// Closed-form `W₂(H(e*), H̃(G))`.
    pub fn exact_distance(&self) -> f64 {
        let m = self.learned_mean(&self.g());
        let d = self.dim();
        let mean = DVector::from_vec(m);
        let target = DVector::from_vec(self.e_star.clone());
        let s = self.learned_std();
        gaussian_w2(
            &mean,
            &DMatrix::identity(d, d) * (s * s),
            &target,
            &DMatrix::identity(d, d),
        )
    }

    /// `n` draws from `H̃(G)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let m = self.learned_mean(&self.g());
        let s = self.learned_std();
        let mut data = Vec::with_capacity(n * m.len());
        for _ in 0..n {
            data.extend(m.iter().map(|mu| mu + s * rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Tensor::new(vec![n, m.len()], data)?)
    }
}

pub fn gaussian_w2(mu_a: &DVector<f64>, cov_a: DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    frechet_from_stats(mu_a, &cov_a, mu_b, cov_b).max(0.0).sqrt()
}

/// `W₂` between the Gaussian fit of `samples` and `N(target, I)`.
pub fn fitted_w2(samples: &Tensor, target: &DVector<f64>) -> Result<f64> {
    let (mu, cov, _) = mean_cov(samples)?;
    let d = target.len();
    Ok(gaussian_w2(&mu, cov, target, &DMatrix::identity(d, d)))
}

pub fn draw_instance<R: Rng + ?Sized>(cfg: &BoundConfig, rng: &mut R) -> Instance {
    let d = rng.random_range(cfg.dim_min..=cfg.dim_max);
    let normal =
        |sd: f64, rng: &mut R| -> Vec<f64> { (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
    let e_star = normal(cfg.embed_scale, rng);
    let enc = cfg.max_encoder_error * rng.random::<f64>();
    let delta = normal(enc, rng);
    let amp = cfg.max_mean_distortion * rng.random::<f64>();
    let b = (0..d).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let alpha = cfg.max_scale_distortion * rng.random::<f64>();
    Instance {
        e_star,
        delta,
        b,
        alpha,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundRecord {
    pub instance: usize,
    pub dim: usize,
    pub eps_base: f64,
    pub u: f64,
    pub encoder_error: f64,
    /// `W₂` estimated from generator samples.
    pub measured: f64,
    /// Closed-form `W₂`, for reference.
    pub exact: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

impl BoundRecord {
    pub const CSV_HEADER: &'static str = "instance,dim,eps_base,u,encoder_error,measured,exact,bound,slack,holds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.instance,
            self.dim,
            num(self.eps_base),
            num(self.u),
            num(self.encoder_error),
            num(self.measured),
            num(self.exact),
            num(self.bound),
            num(self.slack),
            u8::from(self.holds)
        )
    }
}

/// Statistical slack of a fitted `W₂`: parametric bootstrap from the fitted
/// Gaussian gives the estimator's bias and spread; slack is
/// `|bias| + k·sd`.
pub fn bootstrap_slack<R: Rng + ?Sized>(
    samples: &Tensor,
    target: &DVector<f64>,
    measured: f64,
    reps: usize,
    sigmas: f64,
    rng: &mut R,
) -> Result<f64> {
    let (mu, cov, _) = mean_cov(samples)?;
    let root = sqrtm_psd(&cov);
    let (n, d) = (samples.rows(), target.len());
    let mut vals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            data.extend((&mu + &root * z).iter());
        }
        vals.push(fitted_w2(&Tensor::new(vec![n, d], data)?, target)?);
    }
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt();
    Ok((mean - measured).abs() + sigmas * sd)
}

pub fn check_instance<R: Rng + ?Sized>(
    i: usize,
    inst: &Instance,
    cfg: &BoundConfig,
    rng: &mut R,
) -> Result<BoundRecord> {
    let target = DVector::from_vec(inst.e_star.clone());
    let samples = inst.sample(cfg.samples, rng)?;
    let measured = fitted_w2(&samples, &target)?;
    let slack = bootstrap_slack(&samples, &target, measured, cfg.bootstrap_reps, cfg.slack_sigmas, rng)?;
    let (eps_base, u, enc) = (inst.eps_base(), 1.0, inst.encoder_error());
    let bound = eps_base + u * enc;
    Ok(BoundRecord {
        instance: i,
        dim: inst.dim(),
        eps_base,
        u,
        encoder_error: enc,
        measured,
        exact: inst.exact_distance(),
        bound,
        slack,
        holds: measured <= bound + slack,
    })
}

pub fn run_bound_check(cfg: &RunConfig) -> Result<Vec<BoundRecord>> {
    let bc = cfg
        .bound
        .as_ref()
        .ok_or_else(|| CliError::Config("bound-check needs a [bound] section".into()))?;
    let mut out = OutDir::create(cfg, "bound-check")?;
    let mut rng = stream(cfg.seed, streams::BOUND);
    let mut records = Vec::with_capacity(bc.instances);
    let mut csv = Csv::new(BoundRecord::CSV_HEADER, cfg);
    for i in 0..bc.instances {
        let inst = draw_instance(bc, &mut rng);
        let r = check_instance(i, &inst, bc, &mut rng)?;
        csv.row(&r.csv_row());
        records.push(r);
    }
    out.write("bound_check.csv", csv.as_str().as_bytes())?;
    out.finish()?;
    Ok(records)
}

pub fn holds_fraction(records: &[BoundRecord]) -> f64 {
    records.iter().filter(|r| r.holds).count() as f64 / records.len().max(1) as f64
}
