//! Run configuration: one TOML file holds every knob of a command.

use std::path::{Path, PathBuf};

use phenoflow_core::coupling::{CouplingKind, FlowConstruction};
use phenoflow_core::data::{PhiKind, ScreenConfig};
use phenoflow_core::interpolant::Interpolant;
use phenoflow_core::metrics::{Bandwidth, FeatureExtractor, Identity, RandomProjection};
use phenoflow_core::model::{AdaptorConfig, Architecture, MlpConfig, ModelConfig};
use phenoflow_core::sample::SolverSpec;
use phenoflow_core::train::{FlowSetup, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory. Not part of the config hash.
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    #[serde(default = "default_screen")]
    pub screen: ScreenConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_flow")]
    pub flow: FlowSetup,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Guidance strengths to sample at.
    #[serde(default = "default_guidance")]
    pub guidance: Vec<f64>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
    #[serde(default)]
    pub adaptor: Option<AdaptorRun>,
    #[serde(default)]
    pub bound: Option<BoundConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Two-dimensional screen with three treatments and two contexts.
fn default_screen() -> ScreenConfig {
    ScreenConfig::new(2, 4, 2, 0)
}

fn default_model() -> ModelConfig {
    ModelConfig {
        arch: Architecture::Mlp(MlpConfig {
            dim: 2,
            hidden: 64,
            layers: 3,
            time_dim: 16,
            zero_init_out: false,
        }),
        n_pert: 4,
        n_ctx: 2,
        cond_dim: 16,
        init_seed: 0,
    }
}

fn default_flow() -> FlowSetup {
    FlowSetup {
        interpolant: Interpolant::Linear,
        construction: FlowConstruction::NoiseToData,
        coupling: CouplingKind::Independent,
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::new(128, 2000, 0)
}

fn default_guidance() -> Vec<f64> {
    vec![1.0]
}

/// How many samples are drawn from the synthetic screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples per seen (treated perturbation, context) pair.
    pub train_per_condition: usize,
    /// Control samples available per context, for training and as flow sources.
    pub controls_per_context: usize,
    /// Held-out real and generated samples per evaluated condition.
    pub eval_per_condition: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_condition: 200,
            controls_per_context: 5,
            eval_per_condition: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    Identity,
    RandomProjection { dim: usize, seed: u64 },
}

impl ExtractorConfig {
    pub fn build(&self, input_dim: usize) -> Box<dyn FeatureExtractor> {
        match *self {
            Self::Identity => Box::new(Identity),
            Self::RandomProjection { dim, seed } => Box::new(RandomProjection::new(input_dim, dim, seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub extractor: ExtractorConfig,
    /// RBF bandwidth; `median` resolves against the real samples only, so
    /// every generated set is scored with the same kernel.
    pub bandwidth: Bandwidth,
    pub bootstrap_reps: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::Identity,
            bandwidth: Bandwidth::Median,
            bootstrap_reps: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Noise to data.
    #[default]
    Generate,
    /// Invert a control to noise, decode under the target labels.
    Counterfactual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    #[default]
    Ema,
    Live,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default)]
    pub mode: SampleMode,
    #[serde(default)]
    pub weights: Weights,
    /// Rows per solver batch; 0 integrates every row together. Reported
    /// NFE is the mean per batch.
    #[serde(default)]
    pub batch: usize,
}

/// One row group of the ablation matrix: a training setup sampled at
/// every guidance strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCellConfig {
    pub label: String,
    pub flow: FlowSetup,
    /// Inference-time mode; counterfactual needs a noise-sourced flow.
    #[serde(default)]
    pub mode: SampleMode,
    /// Existing checkpoint to sample from instead of training inline.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub cells: Vec<AblationCellConfig>,
    /// Train cells without a checkpoint; otherwise a missing checkpoint is an error.
    #[serde(default = "yes")]
    pub train_inline: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorObjective {
    /// Flow-matching loss through the frozen base.
    #[default]
    FlowMatching,
    /// Regression onto the base's learned perturbation embeddings.
    Alignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptorRun {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub objective: AdaptorObjective,
    /// Feature kinds to train an adaptor for; empty means the screen's own.
    #[serde(default)]
    pub phi: Vec<PhiKind>,
    #[serde(default)]
    pub init_seed: u64,
}

impl AdaptorRun {
    pub fn adaptor_config(&self, in_dim: usize, out_dim: usize) -> AdaptorConfig {
        AdaptorConfig {
            in_dim,
            out_dim,
            hidden: self.hidden,
            layers: self.layers,
            dose_features: 0,
            init_seed: self.init_seed,
        }
    }
}

/// Random Gaussian-family instances for the embedding-error bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub instances: usize,
    /// Embedding dimension range, inclusive.
    pub dim_min: usize,
    pub dim_max: usize,
    /// Samples drawn from the generator per instance.
    pub samples: usize,
    /// Standard deviation of the true embeddings.
    pub embed_scale: f64,
    /// Largest per-coordinate encoder error scale.
    pub max_encoder_error: f64,
    /// Largest per-coordinate amplitude of the generator's mean distortion.
    pub max_mean_distortion: f64,
    /// Largest relative inflation of the generator's standard deviation.
    pub max_scale_distortion: f64,
    pub bootstrap_reps: usize,
    /// Slack in bootstrap standard deviations.
    pub slack_sigmas: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            dim_min: 1,
            dim_max: 6,
            samples: 2000,
            embed_scale: 2.0,
            max_encoder_error: 1.0,
            max_mean_distortion: 0.5,
            max_scale_distortion: 0.3,
            bootstrap_reps: 200,
            slack_sigmas: 3.0,
        }
    }
}

/// Transformer variants trained to divergence from a common unstable setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    /// Seeds per variant; steps-to-divergence is summarised by the median.
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    /// Dropout rate of the dropout variant.
    pub proj_dropout: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let dim = self.model.sample_dim();
        if dim != self.screen.dim {
            return bad(format!(
                "model sample width {dim} differs from screen dim {}",
                self.screen.dim
            ));
        }
        if self.model.n_pert != self.screen.n_pert || self.model.n_ctx != self.screen.n_ctx {
            return bad(format!(
                "model ids {}×{} differ from screen ids {}×{}",
                self.model.n_pert, self.model.n_ctx, self.screen.n_pert, self.screen.n_ctx
            ));
        }
        if self.guidance.is_empty() || self.guidance.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("guidance list must be non-empty and non-negative".into());
        }
        let d = &self.data;
        if d.train_per_condition == 0 || d.controls_per_context == 0 || d.eval_per_condition < 2 {
            return bad("data counts must be positive (eval_per_condition ≥ 2)".into());
        }
        if self.metrics.bootstrap_reps < 2 {
            return bad("bootstrap_reps must be at least 2".into());
        }
        if let Bandwidth::Fixed(s) = self.metrics.bandwidth {
            if !(s > 0.0) {
                return bad(format!("fixed bandwidth {s} must be positive"));
            }
        }
        if let Some(b) = &self.bound {
            if b.instances == 0 || b.dim_min == 0 || b.dim_min > b.dim_max || b.samples < 2 || b.bootstrap_reps < 2 {
                return bad("bound check counts are inconsistent".into());
            }
        }
        if let Some(a) = &self.adaptor {
            if a.steps == 0 || a.batch == 0 || !(a.lr > 0.0) {
                return bad("adaptor steps, batch and lr must be positive".into());
            }
        }
        if let Some(s) = &self.stability {
            if s.seeds.is_empty() || s.max_steps == 0 || !(0.0..1.0).contains(&s.proj_dropout) {
                return bad("stability needs seeds, max_steps > 0 and proj_dropout in [0, 1)".into());
            }
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.flow
            .interpolant
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.flow
            .construction
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
