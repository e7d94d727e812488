//! `train`, `sample`, `eval` and `flops`.

use std::path::PathBuf;

use phenoflow_core::data::{decode_tensor, encode_tensor, estimate_train_flops};
use phenoflow_core::model::{Architecture, Checkpoint, FlowModel, WithParams};
use phenoflow_core::{Error, Tensor};
use serde_json::json;

use super::{contexts, draw_samples, grid_labels, num, reference, resolve_bandwidth, score, streams, Screen};
use crate::artifacts::{read_file, Csv, OutDir};
use crate::config::{SampleMode, Weights};
use crate::{CliError, Result, RunConfig};

fn checkpoint_name(w: Weights) -> &'static str {
    match w {
        Weights::Ema => "ema.ckpt",
        Weights::Live => "live.ckpt",
    }
}

fn mode_name(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Generate => "generate",
        SampleMode::Counterfactual => "counterfactual",
    }
}

pub fn samples_name(mode: SampleMode, w: f64) -> String {
    format!("samples_{}_w{w}.flt", mode_name(mode))
}

/// Trains the configured model and writes live and averaged checkpoints,
/// the loss trace and a manifest. A diverged run still writes its loss
/// trace and manifest before returning [`Error::Divergence`].
pub fn run_train(cfg: &RunConfig) -> Result<PathBuf> {
    let mut out = OutDir::create(cfg, "train")?;
    let screen = Screen::build(cfg)?;
    let data = screen.train_data(&cfg.flow.construction)?;
    let ids = super::check_holdout(&screen.spec, &data.labels)?;
    out.audit("base", ids);
    let trained = super::fit(cfg, &cfg.flow, &data)?;
    let hash = cfg.hash();
    out.write(
        "loss.csv",
        trained.report.to_csv(Some(("config_hash", &hash))).as_bytes(),
    )?;
    for (w, params) in [(Weights::Live, &trained.model.params), (Weights::Ema, &trained.ema)] {
        let meta = json!({
            "config_hash": hash,
            "weights": checkpoint_name(w),
            "steps": trained.report.steps_completed,
        });
        let ckpt = Checkpoint {
            meta: meta.to_string(),
            params: params.clone(),
        };
        out.write(checkpoint_name(w), &ckpt.to_bytes())?;
    }
    let diverged = trained.report.divergence;
    let path = out.finish()?;
    if let Some((step, loss)) = diverged {
        return Err(Error::Divergence { step, loss }.into());
    }
    Ok(path)
}

/// Rebuilds the configured model with weights from the output directory.
pub fn load_model(cfg: &RunConfig) -> Result<FlowModel> {
    let path = cfg.out.join(checkpoint_name(cfg.sample.weights));
    if !path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint {} not found; run train first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::from_bytes(&read_file(&path)?)?;
    let mut model = FlowModel::new(cfg.model.clone())?;
    model.params.load_from(&ckpt.params)?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub guidance: f64,
    /// Mean network evaluations per solver batch.
    pub nfe: f64,
    pub accepted: usize,
    pub rejected: usize,
}

/// Samples every seen (perturbation, context) pair at each guidance
/// strength, and writes the matching real reference set.
pub fn run_sample(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let model = load_model(cfg)?;
    let mut out = OutDir::create(cfg, "sample")?;
    let screen = Screen::build(cfg)?;
    let perts = screen.spec.seen();
    let ctxs = contexts(&screen.spec);
    let n = cfg.data.eval_per_condition;
    let labels = grid_labels(&perts, &ctxs, n);
    let field = WithParams {
        model: &model,
        params: &model.params,
    };
    let mode = cfg.sample.mode;
    let mut csv = Csv::new("mode,guidance,nfe,accepted,rejected,rows", cfg);
    let mut records = Vec::new();
    for &w in &cfg.guidance {
        let (x, stats) = draw_samples(
            &field,
            &cfg.flow.construction,
            mode,
            &labels,
            &screen.pool,
            model.sample_dim(),
            w,
            &cfg.solver,
            cfg.sample.batch,
            cfg.seed,
        )?;
        out.write(&samples_name(mode, w), &encode_tensor(&x)?)?;
        csv.row(&format!(
            "{},{w},{},{},{},{}",
            mode_name(mode),
            stats.nfe(),
            stats.total.accepted,
            stats.total.rejected,
            x.rows()
        ));
        records.push(SampleRecord {
            guidance: w,
            nfe: stats.nfe(),
            accepted: stats.total.accepted,
            rejected: stats.total.rejected,
        });
    }
    let real = reference(&screen.spec, &perts, &ctxs, n, cfg.seed, streams::EVAL_REAL)?;
    out.write("reference.flt", &encode_tensor(&real)?)?;
    out.write("nfe.csv", csv.as_str().as_bytes())?;
    out.finish()?;
    Ok(records)
}

fn read_samples(path: PathBuf) -> Result<Tensor> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run sample first",
            path.display()
        )));
    }
    Ok(decode_tensor(&read_file(&path)?)?)
}

/// Scores a generated set against a real one under the configured metrics.
pub fn evaluate_pair(cfg: &RunConfig, real: &Tensor, generated: &Tensor) -> Result<super::Score> {
    if real.rank() != 2 || generated.rank() != 2 || real.shape()[1] != generated.shape()[1] {
        return Err(super::shape_mismatch("eval", real, generated));
    }
    let extractor = cfg.metrics.extractor.build(real.shape()[1]);
    let bw = resolve_bandwidth(cfg.metrics.bandwidth, &extractor.extract(real)?)?;
    score(real, generated, extractor.as_ref(), bw, &cfg.metrics, cfg.seed)
}

/// Scores every sample file of the configured mode against `reference.flt`.
pub fn run_eval(cfg: &RunConfig) -> Result<Vec<(f64, super::Score)>> {
    let real = read_samples(cfg.out.join("reference.flt"))?;
    let mut out = OutDir::create(cfg, "eval")?;
    let mode = cfg.sample.mode;
    let mut csv = Csv::new(&format!("mode,guidance,{}", super::Score::CSV_HEADER), cfg);
    let mut scores = Vec::new();
    let mut records = String::new();
    for &w in &cfg.guidance {
        let generated = read_samples(cfg.out.join(samples_name(mode, w)))?;
        let s = evaluate_pair(cfg, &real, &generated)?;
        csv.row(&format!("{},{w},{}", mode_name(mode), s.csv_row()));
        records.push_str(&format!("[{} w={w}]\n{}\n", mode_name(mode), s.report.record()));
        scores.push((w, s));
    }
    out.write("metrics.csv", csv.as_str().as_bytes())?;
    out.write("metrics.txt", records.as_bytes())?;
    out.finish()?;
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub params: usize,
    /// Fused multiply-accumulates per forward per sample, attention products excluded.
    pub flops_per_forward: u64,
    pub attention_macs: u64,
    /// Training compute for `train.batch × train.steps` in ExaFLOPs.
    pub train_exaflops: f64,
}

impl FlopReport {
    pub const CSV_HEADER: &'static str = "params,flops_per_forward,attention_macs,train_exaflops";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.params,
            self.flops_per_forward,
            self.attention_macs,
            num(self.train_exaflops)
        )
    }
}

/// Counts from layer shapes alone, so large configurations never allocate.
pub fn flops(cfg: &RunConfig) -> Result<FlopReport> {
    let attention_macs = match &cfg.model.arch {
        Architecture::Mit(m) => {
            m.validate()?;
            m.attention_macs()
        }
        Architecture::Mlp(m) => {
            m.validate()?;
            0
        }
    };
    let (params, flops) = cfg.model.analytic_counts();
    Ok(FlopReport {
        params,
        flops_per_forward: flops,
        attention_macs,
        train_exaflops: estimate_train_flops(flops as f64, cfg.train.batch as f64, cfg.train.steps as f64),
    })
}
