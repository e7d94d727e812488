//! Steps-to-divergence of transformer variants trained from one
//! deliberately unstable setup.

use phenoflow_core::model::{Architecture, FlowModel, MitConfig};
use phenoflow_core::train::{train_loop, TrainConfig};

use super::{num, Screen};
use crate::artifacts::{Csv, OutDir};
use crate::config::StabilityConfig;
use crate::{CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRun {
    pub variant: String,
    pub seed: u64,
    /// Step at which divergence was declared, or `max_steps` when censored.
    pub steps: usize,
    pub diverged: bool,
    pub last_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityResult {
    pub runs: Vec<StabilityRun>,
    pub max_steps: usize,
}

impl StabilityResult {
    pub fn median_steps(&self, variant: &str) -> f64 {
        let mut s: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.steps as f64)
            .collect();
        s.sort_by(f64::total_cmp);
        match s.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => s[n / 2],
            n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
        }
    }
}

pub const BASELINE: &str = "baseline";
pub const DROPOUT: &str = "proj_dropout";
pub const SKIPS: &str = "long_skips";

/// The three variants: neither stabiliser, projection dropout only, long
/// skips only. Everything else comes from the configured transformer.
pub fn variants(base: &MitConfig, st: &StabilityConfig) -> Vec<(&'static str, MitConfig)> {
    let plain = MitConfig {
        proj_dropout: 0.0,
        use_long_skips: false,
        ..base.clone()
    };
    vec![
        (BASELINE, plain.clone()),
        (
            DROPOUT,
            MitConfig {
                proj_dropout: st.proj_dropout,
                ..plain.clone()
            },
        ),
        (
            SKIPS,
            MitConfig {
                use_long_skips: true,
                ..plain
            },
        ),
    ]
}

/// Trains every variant under every seed for at most `max_steps` steps.
/// Divergence ends a run and is recorded; it is never an error.
pub fn run_stability(cfg: &RunConfig) -> Result<StabilityResult> {
    let st = cfg
        .stability
        .as_ref()
        .ok_or_else(|| CliError::Config("stability run needs a [stability] section".into()))?;
    let Architecture::Mit(base) = &cfg.model.arch else {
        return Err(CliError::Config("stability runs need a transformer model".into()));
    };
    let mut out = OutDir::create(cfg, "stability")?;
    let screen = Screen::build(cfg)?;
    let mut data = screen.train_data(&cfg.flow.construction)?;
    out.audit("stability", super::check_holdout(&screen.spec, &data.labels)?);
    data.image = Some((base.channels, base.height, base.width));

    let mut csv = Csv::new("variant,seed,steps,diverged,last_loss", cfg);
    let mut runs = Vec::new();
    for (name, mit) in variants(base, st) {
        for &seed in &st.seeds {
            let mut model_cfg = cfg.model.clone();
            model_cfg.arch = Architecture::Mit(mit.clone());
            model_cfg.init_seed = seed;
            let mut model = FlowModel::new(model_cfg)?;
            let train = TrainConfig {
                steps: st.max_steps,
                seed,
                ..cfg.train.clone()
            };
            let outcome = train_loop(&mut model, &data, &cfg.flow, &train)?;
            let r = &outcome.report;
            let run = StabilityRun {
                variant: name.to_string(),
                seed,
                steps: r.divergence.map_or(st.max_steps, |(s, _)| s),
                diverged: r.diverged(),
                last_loss: r.records.last().map_or(f64::NAN, |l| l.loss),
            };
            csv.row(&format!(
                "{},{},{},{},{}",
                run.variant,
                run.seed,
                run.steps,
                u8::from(run.diverged),
                num(run.last_loss)
            ));
            runs.push(run);
        }
    }
    out.write("stability.csv", csv.as_str().as_bytes())?;
    out.finish()?;
    Ok(StabilityResult {
        runs,
        max_steps: st.max_steps,
    })
}
