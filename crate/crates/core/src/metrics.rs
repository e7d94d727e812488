//! Distances between sample sets: Fréchet distance of fitted Gaussians,
//! unbiased polynomial-kernel MMD (KID) and Gaussian-kernel MMD.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Ridge added to covariances estimated from fewer than `d + 1` samples.
pub const SHRINKAGE: f64 = 1e-6;

/// Maps a batch of samples to an `n × d` feature matrix.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor>;
    fn name(&self) -> String;
}

/// Uses the flattened samples as features.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl FeatureExtractor for Identity {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(1);
        x.reshape(&[n, x.numel() / n])
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Fixed Gaussian projection `x ↦ x·R / sqrt(d_out)`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    pub seed: u64,
    proj: Tensor,
}

impl RandomProjection {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(input_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / (out_dim as f64).sqrt();
        let proj = Tensor::randn(&[input_dim, out_dim], &mut rng).scale(scale);
        Self { seed, proj }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.shape()[1]
    }
}

impl FeatureExtractor for RandomProjection {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let flat = Identity.extract(x)?;
        if flat.shape()[1] != self.proj.shape()[0] {
            return Err(Error::Contract(format!(
                "projection expects width {}, got {}",
                self.proj.shape()[0],
                flat.shape()[1]
            )));
        }
        flat.matmul(&self.proj)
    }

    fn name(&self) -> String {
        format!("random_projection_{}_seed{}", self.out_dim(), self.seed)
    }
}

fn as_matrix(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Contract(format!(
            "features must be a matrix, got shape {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn same_width(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = as_matrix(a)?;
    let (m, e) = as_matrix(b)?;
    if d != e {
        return Err(Error::Contract(format!("feature widths differ: {d} vs {e}")));
    }
    Ok((n, m, d))
}

/// Sample mean and unbiased covariance; the flag reports whether
/// shrinkage was applied.
pub fn mean_cov(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
    let (n, d) = as_matrix(x)?;
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centred = m.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centred.transpose() * &centred / denom;
    let shrink = n < d + 1;
    if shrink {
        for i in 0..d {
            cov[(i, i)] += SHRINKAGE;
        }
    }
    Ok((mu, cov, shrink))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let ra = sqrtm_psd(cov_a);
    let inner = &ra * cov_b * &ra;
    let cross = sqrtm_psd(&inner);
    let v = diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    v.max(0.0)
}

/// Fréchet distance and whether shrinkage was needed on either side.
pub fn frechet_with_flag(a: &Tensor, b: &Tensor) -> Result<(f64, bool)> {
    same_width(a, b)?;
    let (ma, ca, sa) = mean_cov(a)?;
    let (mb, cb, sb) = mean_cov(b)?;
    Ok((frechet_from_stats(&ma, &ca, &mb, &cb), sa || sb))
}

pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(frechet_with_flag(a, b)?.0)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Unbiased MMD² with kernel `(xᵀy/d + 1)³` over the full Gram matrices.
pub fn kid_unbiased(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, m, d) = same_width(a, b)?;
    if n < 2 || m < 2 {
        return Err(Error::Contract(format!(
            "kid needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    let k = |x: &[f64], y: &[f64]| (dot(x, y) / d as f64 + 1.0).powi(3);
    let within = |t: &Tensor, n: usize| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += k(t.row(i), t.row(j));
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(a.row(i), b.row(j));
        }
    }
    Ok(within(a, n) + within(b, m) - 2.0 * cross / (n * m) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled samples (first 1000 of each side).
    Median,
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, m, _) = same_width(a, b)?;
    let rows: Vec<&[f64]> = (0..n.min(1000))
        .map(|i| a.row(i))
        .chain((0..m.min(1000)).map(|i| b.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Biased (V-statistic) MMD² with kernel `exp(−‖x − y‖²/(2σ²))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    let (n, m, _) = same_width(a, b)?;
    if n == 0 || m == 0 {
        return Err(Error::Contract("mmd needs non-empty inputs".into()));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::Domain {
                what: "rbf bandwidth",
                value: s,
                domain: "(0, ∞)",
            })
        }
        Bandwidth::Median => median_bandwidth(a, b)?,
    };
    let g = -0.5 / (sigma * sigma);
    let mean_k = |x: &Tensor, y: &Tensor| {
        let (p, q) = (x.shape()[0], y.shape()[0]);
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..q {
                s += (g * sq_dist(x.row(i), y.row(j))).exp();
            }
        }
        s / (p * q) as f64
    };
    Ok(mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b))
}

/// Standard deviation of `stat` over `reps` bootstrap resamples of both sides.
pub fn bootstrap_se<F, R>(a: &Tensor, b: &Tensor, reps: usize, rng: &mut R, stat: F) -> Result<f64>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64>,
    R: Rng + ?Sized,
{
    let (n, m, _) = same_width(a, b)?;
    if reps < 2 {
        return Err(Error::Contract("bootstrap needs at least 2 replicates".into()));
    }
    let mut vals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let ia: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let ib: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
        vals.push(stat(&a.select_rows(&ia)?, &b.select_rows(&ib)?)?);
    }
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub kid: f64,
    pub kid_scaled: f64,
    pub mmd_rbf: f64,
    pub n_real: usize,
    pub n_gen: usize,
    /// Covariance shrinkage was applied in the Fréchet term.
    pub shrinkage: bool,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet,kid,kid_scaled,mmd_rbf,n_real,n_gen,shrinkage";

    pub fn new(frechet: f64, kid: f64, mmd_rbf: f64, n_real: usize, n_gen: usize, shrinkage: bool) -> Self {
        Self {
            frechet,
            kid,
            kid_scaled: kid * 1000.0,
            mmd_rbf,
            n_real,
            n_gen,
            shrinkage,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{},{},{}",
            self.frechet,
            self.kid,
            self.kid_scaled,
            self.mmd_rbf,
            self.n_real,
            self.n_gen,
            u8::from(self.shrinkage)
        )
    }

    /// `key = value` lines.
    pub fn record(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::CSV_HEADER.split(',').zip(self.csv_row().split(',')) {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

/// Scores generated samples against real ones in the extractor's feature space.
pub fn evaluate<E: FeatureExtractor + ?Sized>(
    real: &Tensor,
    generated: &Tensor,
    extractor: &E,
    bandwidth: Bandwidth,
) -> Result<MetricReport> {
    let fr = extractor.extract(real)?;
    let fg = extractor.extract(generated)?;
    let (frechet, shrink) = frechet_with_flag(&fr, &fg)?;
    let kid = kid_unbiased(&fr, &fg)?;
    let mmd = mmd_rbf(&fr, &fg, bandwidth)?;
    Ok(MetricReport::new(
        frechet,
        kid,
        mmd,
        fr.shape()[0],
        fg.shape()[0],
        shrink,
    ))
}
