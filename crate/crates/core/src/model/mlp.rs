use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Linear, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Width of the flat sample vector.
    pub dim: usize,
    pub hidden: usize,
    /// Number of hidden layers, 2 to 4.
    pub layers: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default)]
    pub zero_init_out: bool,
}

fn default_time_dim() -> usize {
    16
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.layers) {
            return Err(Error::Contract(format!(
                "mlp needs 2-4 hidden layers, got {}",
                self.layers
            )));
        }
        if self.dim == 0 || self.dim > 64 || self.hidden == 0 {
            return Err(Error::Contract(format!(
                "mlp widths must be positive with dim ≤ 64 (dim {}, hidden {})",
                self.dim, self.hidden
            )));
        }
        Ok(())
    }
}

/// GELU network on `concat(x_t, time features, condition)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &MlpConfig, cond_dim: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut width = cfg.dim + cfg.time_dim + cond_dim;
        for i in 0..cfg.layers {
            layers.push(Linear::new(params, &format!("mlp.{i}"), width, cfg.hidden, false, rng));
            width = cfg.hidden;
        }
        layers.push(Linear::new(params, "mlp.out", width, cfg.dim, cfg.zero_init_out, rng));
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, temb: Var, cond: Var) -> Result<Var> {
        let mut h = tape.concat_last(&[x, temb, cond])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn macs(&self) -> usize {
        self.layers.iter().map(Linear::macs).sum()
    }
}
