//! The experiments behind each subcommand, as library calls.

pub mod ablation;
pub mod adaptor;
pub mod bound;
pub mod run;
pub mod stability;

use phenoflow_core::coupling::{ControlPool, FlowConstruction};
use phenoflow_core::data::{control_pool, sample_conditions, ScreenSpec, CONTROL};
use phenoflow_core::metrics::{bootstrap_se, median_bandwidth, mmd_rbf, Bandwidth, FeatureExtractor, MetricReport};
use phenoflow_core::model::{CondLabels, FlowModel, ParamSet, VelocityField};
use phenoflow_core::rng::stream;
use phenoflow_core::sample::{counterfactual, generate, integrate_guided, ReverseCondition, SolverSpec, SolverStats};
use phenoflow_core::train::{train_loop, FlowSetup, TrainData, TrainReport};
use phenoflow_core::{Error, Tensor};

use crate::config::{MetricsConfig, SampleMode, Weights};
use crate::{CliError, Result, RunConfig};

/// Independent random streams of a run, all derived from `RunConfig::seed`.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const POOL: u64 = 2;
    pub const EVAL_REAL: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const ADAPTOR: u64 = 6;
    pub const BOUND: u64 = 7;
    pub const ORACLE: u64 = 8;
}

/// A drawn screen with its training samples and control pool.
pub struct Screen {
    pub spec: ScreenSpec,
    pub pool: ControlPool,
    /// Seen treated perturbations times every context.
    pub treated: Tensor,
    pub treated_labels: Vec<CondLabels>,
}

impl Screen {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let spec = ScreenSpec::from_config(&cfg.screen)?;
        let seen = spec.seen();
        if seen.is_empty() {
            return Err(CliError::Config("screen has no seen treated perturbations".into()));
        }
        let (treated, treated_labels) = sample_conditions(
            &spec,
            &seen,
            &self::contexts(&spec),
            cfg.data.train_per_condition,
            &mut stream(cfg.seed, streams::TRAIN_DATA),
        )?;
        let pool = control_pool(
            &spec,
            cfg.data.controls_per_context,
            &mut stream(cfg.seed, streams::POOL),
        )?;
        Ok(Self {
            spec,
            pool,
            treated,
            treated_labels,
        })
    }

    /// Training set for a flow: noise-sourced flows see the controls as one
    /// more class, control-sourced flows draw them as sources.
    pub fn train_data(&self, construction: &FlowConstruction) -> Result<TrainData> {
        match construction {
            FlowConstruction::NoiseToData => {
                let mut rows: Vec<Vec<f64>> = Vec::new();
                let mut labels = Vec::new();
                for e in self.pool.contexts() {
                    for c in self.pool.get(e).unwrap_or_default() {
                        rows.push(c.clone());
                        labels.push(CondLabels::new(CONTROL, e));
                    }
                }
                let controls = Tensor::from_rows(&rows)?;
                let mut all = self.treated_labels.clone();
                all.extend(labels);
                Ok(TrainData {
                    x: Tensor::concat_rows(&[&self.treated, &controls])?,
                    labels: all,
                    image: None,
                    controls: None,
                })
            }
            FlowConstruction::ControlToPerturbed { .. } => Ok(TrainData {
                x: self.treated.clone(),
                labels: self.treated_labels.clone(),
                image: None,
                controls: Some(self.pool.clone()),
            }),
        }
    }
}

pub fn contexts(spec: &ScreenSpec) -> Vec<usize> {
    (0..spec.n_ctx()).collect()
}

/// Errors if any training label names a held-out perturbation.
pub fn check_holdout(spec: &ScreenSpec, labels: &[CondLabels]) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = labels.iter().filter_map(|l| l.perturbation).collect();
    ids.sort_unstable();
    ids.dedup();
    if let Some(p) = ids.iter().find(|p| spec.is_holdout(**p)) {
        return Err(CliError::Data(format!(
            "holdout leakage: perturbation {p} is in a training set"
        )));
    }
    Ok(ids)
}

/// A model with the weights used for sampling.
pub struct Trained {
    pub model: FlowModel,
    pub ema: ParamSet,
    pub report: TrainReport,
}

impl Trained {
    pub fn weights(&self, w: Weights) -> &ParamSet {
        match w {
            Weights::Ema => &self.ema,
            Weights::Live => &self.model.params,
        }
    }
}

/// Trains `cfg.model` on `data` with the given setup. Divergence is left in
/// the report for the caller to judge.
pub fn fit(cfg: &RunConfig, flow: &FlowSetup, data: &TrainData) -> Result<Trained> {
    let mut model = FlowModel::new(cfg.model.clone())?;
    let out = train_loop(&mut model, data, flow, &cfg.train)?;
    Ok(Trained {
        model,
        ema: out.ema.params,
        report: out.report,
    })
}

/// `n` label rows for every `(perturbation, context)` pair, perturbation-major.
pub fn grid_labels(perts: &[usize], contexts: &[usize], n: usize) -> Vec<CondLabels> {
    let mut out = Vec::with_capacity(perts.len() * contexts.len() * n);
    for &p in perts {
        for &e in contexts {
            out.extend(std::iter::repeat_n(CondLabels::new(p, e), n));
        }
    }
    out
}

/// One control per label row, cycling through the pool of the row's context
/// so every control is used evenly.
pub fn pool_sources(pool: &ControlPool, labels: &[CondLabels]) -> Result<Tensor> {
    let mut used: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut rows = Vec::with_capacity(labels.len());
    for l in labels {
        let e = l
            .context
            .ok_or_else(|| CliError::Data("control-sourced sampling needs a context id".into()))?;
        let controls = pool
            .get(e)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| CliError::Data(format!("no controls for context {e}")))?;
        let k = used.entry(e).or_default();
        rows.push(controls[*k % controls.len()].clone());
        *k += 1;
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Solver work of a sampling call split into equal batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleStats {
    pub total: SolverStats,
    pub batches: usize,
}

impl SampleStats {
    /// Mean network evaluations per solver batch.
    pub fn nfe(&self) -> f64 {
        self.total.nfe as f64 / self.batches.max(1) as f64
    }
}

/// Samples one row per label under `construction` and `mode`, integrating
/// `batch` rows at a time (all rows when `batch` is 0).
#[allow(clippy::too_many_arguments)]
pub fn draw_samples<V: VelocityField + ?Sized>(
    field: &V,
    construction: &FlowConstruction,
    mode: SampleMode,
    labels: &[CondLabels],
    pool: &ControlPool,
    dim: usize,
    w: f64,
    solver: &SolverSpec,
    batch: usize,
    seed: u64,
) -> Result<(Tensor, SampleStats)> {
    if labels.is_empty() {
        return Err(CliError::Data("nothing to sample".into()));
    }
    if matches!(construction, FlowConstruction::ControlToPerturbed { .. }) && mode == SampleMode::Counterfactual {
        return Err(CliError::Config(
            "counterfactual sampling needs a noise-sourced flow".into(),
        ));
    }
    let mut rng = stream(seed, streams::GENERATE);
    let sources = match construction {
        FlowConstruction::ControlToPerturbed { .. } => Some(pool_sources(pool, labels)?),
        FlowConstruction::NoiseToData if mode == SampleMode::Counterfactual => Some(pool_sources(pool, labels)?),
        FlowConstruction::NoiseToData => None,
    };
    let size = if batch == 0 { labels.len() } else { batch };
    let mut parts = Vec::new();
    let mut stats = SampleStats::default();
    for (k, chunk) in labels.chunks(size).enumerate() {
        let rows: Vec<usize> = (k * size..k * size + chunk.len()).collect();
        let src = sources.as_ref().map(|s| s.select_rows(&rows)).transpose()?;
        let (x, st) = match (construction, mode, src) {
            (FlowConstruction::NoiseToData, SampleMode::Generate, _) => {
                generate(field, chunk, dim, w, solver, &mut rng)?
            }
            (FlowConstruction::NoiseToData, SampleMode::Counterfactual, Some(x)) => {
                let (out, st) = counterfactual(field, &x, chunk, w, solver, &ReverseCondition::Null)?;
                (out, st.total())
            }
            (FlowConstruction::ControlToPerturbed { .. }, SampleMode::Generate, Some(x)) => {
                integrate_guided(field, &x, chunk, w, solver)?
            }
            _ => unreachable!("checked above"),
        };
        stats.total = stats.total.combine(&st);
        stats.batches += 1;
        parts.push(x);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat_rows(&refs)?, stats))
}

/// Real held-out samples with the composition of `labels` (which must be
/// grouped as produced by [`grid_labels`]).
pub fn reference(
    spec: &ScreenSpec,
    perts: &[usize],
    contexts: &[usize],
    n: usize,
    seed: u64,
    tag: u64,
) -> Result<Tensor> {
    Ok(sample_conditions(spec, perts, contexts, n, &mut stream(seed, tag))?.0)
}

/// RBF bandwidth for a comparison against `real`: fixed, or the median
/// pairwise distance between the two halves of the real features.
pub fn resolve_bandwidth(bw: Bandwidth, real_features: &Tensor) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(s) => Ok(s),
        Bandwidth::Median => {
            let n = real_features.rows();
            let a: Vec<usize> = (0..n / 2).collect();
            let b: Vec<usize> = (n / 2..n).collect();
            Ok(median_bandwidth(
                &real_features.select_rows(&a)?,
                &real_features.select_rows(&b)?,
            )?)
        }
    }
}

/// Metric report plus the bootstrap standard error of its MMD.
#[derive(Clone, Debug)]
pub struct Score {
    pub report: MetricReport,
    pub mmd_se: f64,
    pub bandwidth: f64,
}

impl Score {
    pub const CSV_HEADER: &'static str = "frechet,kid,kid_scaled,mmd_rbf,n_real,n_gen,shrinkage,mmd_se,bandwidth";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e}", self.report.csv_row(), self.mmd_se, self.bandwidth)
    }
}

/// Scores `generated` against `real` with a bandwidth fixed by `bandwidth`
/// (which the caller resolves once so that competing sets share a kernel).
pub fn score(
    real: &Tensor,
    generated: &Tensor,
    extractor: &dyn FeatureExtractor,
    bandwidth: f64,
    metrics: &MetricsConfig,
    seed: u64,
) -> Result<Score> {
    let report = phenoflow_core::metrics::evaluate(real, generated, extractor, Bandwidth::Fixed(bandwidth))?;
    let fr = extractor.extract(real)?;
    let fg = extractor.extract(generated)?;
    let mmd_se = bootstrap_se(
        &fr,
        &fg,
        metrics.bootstrap_reps,
        &mut stream(seed, streams::BOOTSTRAP),
        |a, b| mmd_rbf(a, b, Bandwidth::Fixed(bandwidth)),
    )?;
    Ok(Score {
        report,
        mmd_se,
        bandwidth,
    })
}

/// Formats a float for CSV output.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub(crate) fn shape_mismatch(what: &str, a: &Tensor, b: &Tensor) -> CliError {
    CliError::Core(Error::Contract(format!(
        "{what}: shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    )))
}
