//! Flow-matching objective, optimiser, parameter averaging and the training loop.

mod augment;
mod ema;
mod loss;
mod optim;

pub use augment::{augment, flip_horizontal, flip_vertical};
pub use ema::{gamma_from_sigma_rel, sigma_rel_of_gamma, EmaState};
pub use loss::{fm_batch, fm_loss, fm_loss_with, oracle_for, FmBatch};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, LrSchedule};

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::coupling::{pair_control, pair_independent, pair_ot_within, ControlPool, CouplingKind, FlowConstruction};
use crate::error::{Error, Result};
use crate::interpolant::Interpolant;
use crate::model::{CondLabels, FlowModel, ForwardCtx, ParamSet};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: usize,
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    #[serde(default = "default_sigma_rel")]
    pub ema_sigma_rel: f64,
    #[serde(default)]
    pub seed: u64,
    /// Loss trace granularity.
    #[serde(default = "one")]
    pub log_every: usize,
}

fn default_cond_dropout() -> f64 {
    0.15
}

fn default_sigma_rel() -> f64 {
    0.01
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(batch: usize, steps: usize, seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            batch,
            steps,
            cond_dropout: default_cond_dropout(),
            ema_sigma_rel: default_sigma_rel(),
            seed,
            log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Contract("batch and log_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Domain {
                what: "cond_dropout",
                value: self.cond_dropout,
                domain: "[0, 1)",
            });
        }
        gamma_from_sigma_rel(self.ema_sigma_rel)?;
        Ok(())
    }
}

/// How training pairs are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSetup {
    pub interpolant: Interpolant,
    pub construction: FlowConstruction,
    #[serde(default)]
    pub coupling: CouplingKind,
}

/// Target samples with their labels, plus controls for control-sourced flows.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// `N × F` samples.
    pub x: Tensor,
    pub labels: Vec<CondLabels>,
    /// `(C, H, W)` when rows are images; enables augmentation.
    pub image: Option<(usize, usize, usize)>,
    pub controls: Option<ControlPool>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    /// Step and loss at which divergence was declared.
    pub divergence: Option<(usize, f64)>,
    pub steps_completed: usize,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Loss trace as CSV with header `step,loss,grad_norm,diverged`, plus an
    /// optional constant column.
    pub fn to_csv(&self, extra: Option<(&str, &str)>) -> String {
        let mut s = String::from("step,loss,grad_norm,diverged");
        if let Some((k, _)) = extra {
            write!(s, ",{k}").unwrap();
        }
        s.push('\n');
        for r in &self.records {
            write!(s, "{},{:e},{:e},{}", r.step, r.loss, r.grad_norm, u8::from(r.diverged)).unwrap();
            if let Some((_, v)) = extra {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Mean loss over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Declares divergence when a loss is non-finite or exceeds `factor` times
/// the median of the trailing `window` losses.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    pub factor: f64,
    pub window: usize,
    pub min_history: usize,
    history: std::collections::VecDeque<f64>,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        Self {
            factor: 10.0,
            window: 1000,
            min_history: 20,
            history: Default::default(),
        }
    }
}

impl DivergenceMonitor {
    /// Returns `true` if `loss` counts as divergence; otherwise records it.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        if self.history.len() >= self.min_history {
            let mut sorted: Vec<f64> = self.history.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let m = sorted.len();
            let median = if m % 2 == 1 {
                sorted[m / 2]
            } else {
                0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
            };
            if loss > self.factor * median {
                return true;
            }
        }
        self.history.push_back(loss);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        false
    }
}

/// Live weights are left in `model.params`; the average is returned.
pub struct TrainOutcome {
    pub ema: EmaState,
    pub report: TrainReport,
}

/// Seed for the stochastic layers of step `step`.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

/// Draws a batch of `(x0, x1, labels)` pairs.
pub fn draw_pairs<R: Rng + ?Sized>(
    data: &TrainData,
    setup: &FlowSetup,
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Vec<CondLabels>)> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    let mut x1 = data.x.select_rows(&idx)?;
    let labels: Vec<CondLabels> = idx.iter().map(|&i| data.labels[i].clone()).collect();
    if let Some(image) = data.image {
        x1 = augment(&x1, image, rng)?;
    }
    let x0 = match setup.construction {
        FlowConstruction::NoiseToData => {
            let (x0, _) = pair_independent(&x1, rng);
            match setup.coupling {
                CouplingKind::Independent => x0,
                CouplingKind::MinibatchOt => {
                    let keys: Vec<_> = labels.iter().map(|l| (l.perturbation, l.context)).collect();
                    pair_ot_within(&x0, &x1, &keys)?
                }
            }
        }
        FlowConstruction::ControlToPerturbed { noise_aug_prob } => {
            let pool = data
                .controls
                .as_ref()
                .ok_or_else(|| Error::Data("control-sourced flow without a control pool".into()))?;
            let contexts = labels
                .iter()
                .map(|l| {
                    l.context
                        .ok_or_else(|| Error::Data("sample without a context id".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (x0, _) = pair_control(&x1, &contexts, pool, rng, noise_aug_prob)?;
            match setup.coupling {
                CouplingKind::Independent => x0,
                CouplingKind::MinibatchOt => {
                    let keys: Vec<_> = labels.iter().map(|l| (l.perturbation, l.context)).collect();
                    pair_ot_within(&x0, &x1, &keys)?
                }
            }
        }
    };
    Ok((x0, x1, labels))
}

/// Gradients of every parameter, in [`ParamSet`] order.
pub fn loss_and_grads(
    model: &FlowModel,
    params: &ParamSet,
    batch: &FmBatch,
    labels: &[CondLabels],
    ctx: &mut ForwardCtx,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let loss = fm_loss(&mut tape, model, &p, batch, labels, None, ctx)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.get(v)).collect()))
}

/// Runs `cfg.steps` optimiser steps, halting early on divergence. The loss
/// is monitored every step and recorded every `cfg.log_every` steps (and at
/// the step that diverged).
pub fn train_loop(
    model: &mut FlowModel,
    data: &TrainData,
    setup: &FlowSetup,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    setup.interpolant.validate()?;
    setup.construction.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut ema = EmaState::new(cfg.ema_sigma_rel, &model.params)?;
    let mut monitor = DivergenceMonitor::default();
    let mut report = TrainReport::default();

    for step in 1..=cfg.steps {
        let (x0, x1, labels) = draw_pairs(data, setup, cfg.batch, &mut rng)?;
        let batch = fm_batch(&setup.interpolant, &x0, &x1, &mut rng)?;
        let mut ctx = ForwardCtx::train(step_seed(cfg.seed, step), cfg.cond_dropout);
        let (loss, grads) = match loss_and_grads(model, &model.params, &batch, &labels, &mut ctx) {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        let grad_norm = if grads.is_empty() {
            f64::NAN
        } else {
            global_norm(&grads)
        };
        if monitor.observe(loss) || !grad_norm.is_finite() {
            report.records.push(LossRecord {
                step,
                loss,
                grad_norm,
                diverged: true,
            });
            report.divergence = Some((step, loss));
            break;
        }
        adam_step(&mut model.params, grads, &mut adam, &cfg.adam)?;
        ema.update(&model.params, step)?;
        report.steps_completed = step;
        if step % cfg.log_every == 0 || step == cfg.steps {
            report.records.push(LossRecord {
                step,
                loss,
                grad_norm,
                diverged: false,
            });
        }
    }
    Ok(TrainOutcome { ema, report })
}
