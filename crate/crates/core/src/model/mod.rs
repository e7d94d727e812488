//! Velocity networks, their conditioning and parameter storage.

mod adaptor;
mod checkpoint;
mod embed;
mod mit;
mod mlp;
mod params;

pub use adaptor::{Adaptor, AdaptorConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::{time_features, CondLabels, ConditionEmbedder, ForwardCtx, COND_DROPOUT};
pub use mit::{patchify_index, unpatchify_index, Mit, MitConfig};
pub use mlp::{Mlp, MlpConfig};
pub use params::{Bound, Init, Linear, ParamId, ParamSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;

/// Anything that maps `(x_t, t, labels)` to a velocity of `x_t`'s shape.
///
/// `x` is `B × F`; row `i` is conditioned on `labels[i]`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[CondLabels]) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, &[CondLabels]) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, labels: &[CondLabels]) -> Result<Tensor> {
        self(x, t, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpConfig),
    Mit(MitConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Number of perturbation ids `P`.
    pub n_pert: usize,
    /// Number of context ids `E`.
    pub n_ctx: usize,
    /// Conditioning width; ignored by the transformer, which uses its hidden width.
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_cond_dim() -> usize {
    16
}

impl ModelConfig {
    pub fn sample_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp(c) => c.dim,
            Architecture::Mit(c) => c.sample_dim(),
        }
    }

    pub fn effective_cond_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp(_) => self.cond_dim,
            Architecture::Mit(c) => c.hidden,
        }
    }

    /// Parameter count and dense multiply-accumulates per sample without
    /// allocating the model.
    pub fn analytic_counts(&self) -> (usize, u64) {
        let tables = (self.n_pert + 1 + self.n_ctx + 1) * self.effective_cond_dim();
        let (params, macs) = match &self.arch {
            Architecture::Mlp(c) => {
                let mut width = c.dim + c.time_dim + self.cond_dim;
                let (mut params, mut macs) = (0, 0);
                for _ in 0..c.layers {
                    params += width * c.hidden + c.hidden;
                    macs += width * c.hidden;
                    width = c.hidden;
                }
                (params + width * c.dim + c.dim, (macs + width * c.dim) as u64)
            }
            Architecture::Mit(c) => c.analytic_counts(),
        };
        (params + tables, macs)
    }

    fn time_dim(&self) -> usize {
        match &self.arch {
            Architecture::Mlp(c) => c.time_dim,
            Architecture::Mit(c) => c.time_dim,
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Mlp(Mlp),
    Mit(Box<Mit>),
}

/// A velocity network together with its condition embedder and parameters.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ModelConfig,
    pub params: ParamSet,
    pub embedder: ConditionEmbedder,
    net: Net,
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.n_pert == 0 || config.n_ctx == 0 {
            return Err(Error::Contract("need at least one perturbation and one context".into()));
        }
        let mut rng = seeded(config.init_seed);
        let mut params = ParamSet::new();
        let cond_dim = config.effective_cond_dim();
        let embedder = ConditionEmbedder::new(&mut params, config.n_pert, config.n_ctx, cond_dim, &mut rng);
        let net = match &config.arch {
            Architecture::Mlp(c) => {
                c.validate()?;
                Net::Mlp(Mlp::new(&mut params, c, cond_dim, &mut rng))
            }
            Architecture::Mit(c) => Net::Mit(Box::new(Mit::new(&mut params, c, &mut rng)?)),
        };
        Ok(Self {
            config,
            params,
            embedder,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sample_dim(&self) -> usize {
        self.config.sample_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.embedder.dim
    }

    /// Records a forward pass. `times[i]` is the time of row `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        times: &[f64],
        labels: &[CondLabels],
        external: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let b = tape.shape(x).first().copied().unwrap_or(1);
        if tape.shape(x) != [b, self.sample_dim()] {
            return Err(shape_err(
                "velocity",
                format!(
                    "input {:?}, model expects rows of width {}",
                    tape.shape(x),
                    self.sample_dim()
                ),
            ));
        }
        if times.len() != b || labels.len() != b {
            return Err(shape_err(
                "velocity",
                format!("{b} rows with {} times and {} labels", times.len(), labels.len()),
            ));
        }
        let temb = tape.constant(time_features(times, self.config.time_dim())?);
        let cond = self.embedder.embed(tape, p, labels, external, ctx)?;
        match &self.net {
            Net::Mlp(m) => m.forward(tape, p, x, temb, cond),
            Net::Mit(m) => m.forward(tape, p, x, temb, cond, ctx),
        }
    }

    /// Evaluation-mode velocity using `params` in place of the model's own
    /// (for EMA weights).
    pub fn velocity_with(&self, params: &ParamSet, x: &Tensor, t: f64, labels: &[CondLabels]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let times = vec![t; x.shape().first().copied().unwrap_or(1)];
        let out = self.forward(&mut tape, &p, xv, &times, labels, None, &mut ForwardCtx::eval())?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalars in the condition tables.
    pub fn conditioning_param_count(&self) -> usize {
        self.params.get(self.embedder.pert_table).numel() + self.params.get(self.embedder.ctx_table).numel()
    }

    /// Analytic multiply-accumulates per sample per forward pass, as
    /// `(dense, attention)`.
    pub fn macs_per_sample(&self) -> (u64, u64) {
        match &self.net {
            Net::Mlp(m) => (m.macs() as u64, 0),
            Net::Mit(m) => (m.dense_macs(), m.attention_macs()),
        }
    }

    /// Parameter count and fused multiply-accumulate FLOPs per forward per
    /// sample. Attention products are left out, as fused kernels report them.
    pub fn count_params_flops(&self) -> (usize, u64) {
        (self.param_count(), self.macs_per_sample().0)
    }
}

impl VelocityField for FlowModel {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[CondLabels]) -> Result<Tensor> {
        self.velocity_with(&self.params, x, t, labels)
    }
}

/// A model evaluated with a separate parameter set (for example EMA weights).
pub struct WithParams<'a> {
    pub model: &'a FlowModel,
    pub params: &'a ParamSet,
}

impl VelocityField for WithParams<'_> {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[CondLabels]) -> Result<Tensor> {
        self.model.velocity_with(self.params, x, t, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config(zero: bool) -> ModelConfig {
        ModelConfig {
            arch: Architecture::Mlp(MlpConfig {
                dim: 3,
                hidden: 8,
                layers: 2,
                time_dim: 4,
                zero_init_out: zero,
            }),
            n_pert: 2,
            n_ctx: 1,
            cond_dim: 4,
            init_seed: 1,
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let m = FlowModel::new(mlp_config(true)).unwrap();
        let x = Tensor::full(&[2, 3], 0.7);
        let v = m
            .velocity(&x, 0.3, &[CondLabels::new(0, 0), CondLabels::null()])
            .unwrap();
        assert_eq!(v, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn mlp_counts_match_tape() {
        let m = FlowModel::new(mlp_config(false)).unwrap();
        let (params, flops) = m.count_params_flops();
        // 3 inputs + 4 time + 4 cond = 11 → 8 → 8 → 3, plus tables 3×4 and 2×4.
        assert_eq!(params, (11 * 8 + 8) + (8 * 8 + 8) + (8 * 3 + 3) + 12 + 8);
        assert_eq!(flops, 11 * 8 + 8 * 8 + 8 * 3);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let labels = vec![CondLabels::null(); 5];
        m.forward(&mut tape, &p, x, &[0.1; 5], &labels, None, &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(tape.macs().dense, 5 * flops);
        assert_eq!(tape.macs().activation, 0);
    }

    #[test]
    fn analytic_counts_match_constructed_models() {
        let mut configs = vec![mlp_config(false)];
        for (skips, depth) in [(false, 3), (true, 4)] {
            let mut c = MitConfig::toy(2, 4, 6);
            c.use_long_skips = skips;
            c.depth = depth;
            configs.push(ModelConfig {
                arch: Architecture::Mit(c),
                n_pert: 3,
                n_ctx: 2,
                cond_dim: 16,
                init_seed: 0,
            });
        }
        for cfg in configs {
            let m = FlowModel::new(cfg.clone()).unwrap();
            let (params, flops) = m.count_params_flops();
            assert_eq!(cfg.analytic_counts(), (params, flops));
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let m = FlowModel::new(mlp_config(false)).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        assert!(m.velocity(&x, 0.0, &[CondLabels::null(), CondLabels::null()]).is_err());
    }
}
