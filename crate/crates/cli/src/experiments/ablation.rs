//! The design-space matrix: each cell is a training setup sampled at every
//! guidance strength and scored against the same held-out reference.

use phenoflow_core::coupling::{CouplingKind, FlowConstruction};
use phenoflow_core::model::{read_checkpoint, FlowModel, WithParams};
use phenoflow_core::train::{FlowSetup, TrainReport};
use phenoflow_core::Error;

use super::{
    contexts, draw_samples, grid_labels, num, reference, resolve_bandwidth, score, streams, Score, Screen, Trained,
};
use crate::artifacts::{Csv, OutDir};
use crate::config::{AblationCellConfig, SampleMode};
use crate::{CliError, Result, RunConfig};

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub label: String,
    pub flow: FlowSetup,
    pub mode: SampleMode,
    pub guidance: f64,
    pub score: Score,
    /// Mean network evaluations per solver batch.
    pub nfe: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// Mean training loss over the last 100 steps; NaN for loaded checkpoints.
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    /// A fresh real draw scored like a model: the finite-sample floor.
    pub oracle: Score,
}

impl AblationResult {
    pub fn cell(&self, label: &str, guidance: f64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.label == label && c.guidance == guidance)
    }
}

pub const CSV_HEADER: &str = "label,construction,coupling,mode,guidance";

fn construction_name(c: &FlowConstruction) -> &'static str {
    match c {
        FlowConstruction::NoiseToData => "noise_to_data",
        FlowConstruction::ControlToPerturbed { .. } => "control_to_perturbed",
    }
}

fn coupling_name(c: CouplingKind) -> &'static str {
    match c {
        CouplingKind::Independent => "independent",
        CouplingKind::MinibatchOt => "minibatch_ot",
    }
}

fn obtain(cfg: &RunConfig, cell: &AblationCellConfig, screen: &Screen, inline: bool) -> Result<Trained> {
    if let Some(path) = &cell.checkpoint {
        if !path.exists() {
            return Err(CliError::Data(format!(
                "cell {}: checkpoint {} not found",
                cell.label,
                path.display()
            )));
        }
        let ckpt = read_checkpoint(path)?;
        let mut model = FlowModel::new(cfg.model.clone())?;
        model.params.load_from(&ckpt.params)?;
        return Ok(Trained {
            ema: model.params.clone(),
            model,
            report: TrainReport::default(),
        });
    }
    if !inline {
        return Err(CliError::Data(format!(
            "cell {}: no checkpoint given and inline training is off",
            cell.label
        )));
    }
    let data = screen.train_data(&cell.flow.construction)?;
    super::check_holdout(&screen.spec, &data.labels)?;
    let trained = super::fit(cfg, &cell.flow, &data)?;
    if let Some((step, loss)) = trained.report.divergence {
        return Err(CliError::Core(Error::Divergence { step, loss }));
    }
    Ok(trained)
}

/// Runs every cell of `cfg.ablation`. Cells sharing a training setup share
/// one trained model; all cells sample from the same noise seed.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationResult> {
    let ablation = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| CliError::Config("ablate needs an [ablation] section".into()))?;
    let mut out = OutDir::create(cfg, "ablate")?;
    let screen = Screen::build(cfg)?;
    let perts = screen.spec.seen();
    let ctxs = contexts(&screen.spec);
    let n = cfg.data.eval_per_condition;
    let labels = grid_labels(&perts, &ctxs, n);
    let real = reference(&screen.spec, &perts, &ctxs, n, cfg.seed, streams::EVAL_REAL)?;
    let extractor = cfg.metrics.extractor.build(screen.spec.dim);
    let bw = resolve_bandwidth(cfg.metrics.bandwidth, &extractor.extract(&real)?)?;
    let fresh = reference(&screen.spec, &perts, &ctxs, n, cfg.seed, streams::ORACLE)?;
    let oracle = score(&real, &fresh, extractor.as_ref(), bw, &cfg.metrics, cfg.seed)?;

    let header = format!("{CSV_HEADER},{},nfe,accepted,rejected,final_loss", Score::CSV_HEADER);
    let mut csv = Csv::new(&header, cfg);
    csv.row(&format!("oracle,real,none,none,0,{},0,0,0,NaN", oracle.csv_row()));

    let mut trained: Vec<(FlowSetup, Trained)> = Vec::new();
    let mut cells = Vec::new();
    for cell in &ablation.cells {
        let idx = match trained
            .iter()
            .position(|(f, _)| *f == cell.flow && cell.checkpoint.is_none())
        {
            Some(i) => i,
            None => {
                let t = obtain(cfg, cell, &screen, ablation.train_inline)?;
                let ids = super::check_holdout(&screen.spec, &screen.train_data(&cell.flow.construction)?.labels)?;
                out.audit(&format!("cell:{}", cell.label), ids);
                trained.push((cell.flow.clone(), t));
                trained.len() - 1
            }
        };
        let t = &trained[idx].1;
        let field = WithParams {
            model: &t.model,
            params: &t.ema,
        };
        let final_loss = if t.report.records.is_empty() {
            f64::NAN
        } else {
            t.report.tail_mean(100)
        };
        for &w in &cfg.guidance {
            let (gen, stats) = draw_samples(
                &field,
                &cell.flow.construction,
                cell.mode,
                &labels,
                &screen.pool,
                screen.spec.dim,
                w,
                &cfg.solver,
                cfg.sample.batch,
                cfg.seed,
            )?;
            let s = score(&real, &gen, extractor.as_ref(), bw, &cfg.metrics, cfg.seed)?;
            csv.row(&format!(
                "{},{},{},{},{w},{},{},{},{},{}",
                cell.label,
                construction_name(&cell.flow.construction),
                coupling_name(cell.flow.coupling),
                match cell.mode {
                    SampleMode::Generate => "generate",
                    SampleMode::Counterfactual => "counterfactual",
                },
                s.csv_row(),
                stats.nfe(),
                stats.total.accepted,
                stats.total.rejected,
                num(final_loss)
            ));
            cells.push(AblationCell {
                label: cell.label.clone(),
                flow: cell.flow.clone(),
                mode: cell.mode,
                guidance: w,
                score: s,
                nfe: stats.nfe(),
                accepted: stats.total.accepted,
                rejected: stats.total.rejected,
                final_loss,
            });
        }
    }
    out.write("ablation.csv", csv.as_str().as_bytes())?;
    out.finish()?;
    Ok(AblationResult { cells, oracle })
}
