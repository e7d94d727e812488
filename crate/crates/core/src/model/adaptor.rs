use serde::{Deserialize, Serialize};

use super::embed::time_features;
use super::params::{Bound, Linear, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptorConfig {
    /// Width of the external feature vector `φ`.
    pub in_dim: usize,
    /// Conditioning width of the base model.
    pub out_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Hidden layers; 0 gives a single linear map.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Width of the sinusoidal dose features; 0 disables dose input.
    #[serde(default)]
    pub dose_features: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_hidden() -> usize {
    32
}

fn default_layers() -> usize {
    1
}

/// Small network from external perturbation features (and optionally a
/// dose) to the conditioning space of a frozen base model.
#[derive(Clone, Debug)]
pub struct Adaptor {
    pub cfg: AdaptorConfig,
    pub params: ParamSet,
    layers: Vec<Linear>,
}

impl Adaptor {
    pub fn new(cfg: AdaptorConfig) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.out_dim == 0 || (cfg.layers > 0 && cfg.hidden == 0) {
            return Err(Error::Contract("adaptor widths must be positive".into()));
        }
        if !cfg.dose_features.is_multiple_of(2) {
            return Err(Error::Contract("dose feature width must be even".into()));
        }
        let mut rng = seeded(cfg.init_seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut width = cfg.in_dim + cfg.dose_features;
        for i in 0..cfg.layers {
            layers.push(Linear::new(
                &mut params,
                &format!("adaptor.{i}"),
                width,
                cfg.hidden,
                false,
                &mut rng,
            ));
            width = cfg.hidden;
        }
        layers.push(Linear::new(
            &mut params,
            "adaptor.out",
            width,
            cfg.out_dim,
            false,
            &mut rng,
        ));
        Ok(Self { cfg, params, layers })
    }

    fn inputs(&self, tape: &mut Tape, phi: Var, dose: Option<&[f64]>) -> Result<Var> {
        let shape = tape.shape(phi).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.in_dim {
            return Err(Error::Contract(format!(
                "adaptor expects features of width {}, got shape {shape:?}",
                self.cfg.in_dim
            )));
        }
        match (self.cfg.dose_features, dose) {
            (0, None) => Ok(phi),
            (0, Some(_)) => Err(Error::Contract("adaptor built without dose input".into())),
            (_, None) => Err(Error::Contract("adaptor needs a dose per row".into())),
            (w, Some(d)) => {
                if d.len() != shape[0] {
                    return Err(Error::Contract(format!("{} doses for {} rows", d.len(), shape[0])));
                }
                let feats = tape.constant(time_features(d, w)?);
                tape.concat_last(&[phi, feats])
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, phi: Var, dose: Option<&[f64]>) -> Result<Var> {
        let mut h = self.inputs(tape, phi, dose)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    /// Numeric forward pass.
    pub fn apply(&self, phi: &Tensor, dose: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(phi.clone());
        let y = self.forward(&mut tape, &p, x, dose)?;
        Ok(tape.value(y).clone())
    }

    /// Mean squared distance between adapted features and target embeddings.
    pub fn alignment_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phi: &Tensor,
        dose: Option<&[f64]>,
        target: &Tensor,
    ) -> Result<Var> {
        let x = tape.constant(phi.clone());
        let y = self.forward(tape, p, x, dose)?;
        let t = tape.constant(target.clone());
        tape.mse(y, t)
    }
}
