//! Unseen perturbations: a base model trained on seen ids is frozen, and a
//! small adaptor learns to map perturbation features into its conditioning
//! space. Seen and held-out perturbations are scored separately.

use phenoflow_core::coupling::FlowConstruction;
use phenoflow_core::data::{PhiKind, ScreenSpec};
use phenoflow_core::metrics::{bootstrap_se, mmd_rbf, Bandwidth, FeatureExtractor};
use phenoflow_core::model::{Adaptor, Checkpoint, CondLabels, FlowModel, ForwardCtx, ParamSet, WithParams};
use phenoflow_core::rng::stream;
use phenoflow_core::sample::generate;
use phenoflow_core::train::{adam_step, fm_batch, fm_loss, AdamConfig, AdamState, TrainData};
use phenoflow_core::{Tape, Tensor};
use rand::Rng;

use super::{contexts, grid_labels, num, reference, resolve_bandwidth, streams, Screen};
use crate::artifacts::{sha256_hex, Csv, OutDir};
use crate::config::{AdaptorObjective, AdaptorRun};
use crate::{CliError, Result, RunConfig};

/// Mean per-condition MMD over a set of conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitScore {
    pub method: String,
    pub split: String,
    pub mean_mmd: f64,
    /// Bootstrap standard error of the mean.
    pub se: f64,
    pub conditions: usize,
    pub per_condition: usize,
}

#[derive(Clone, Debug)]
pub struct AdaptorResult {
    pub rows: Vec<SplitScore>,
    /// Final-window adaptor training loss per feature kind.
    pub train_loss: Vec<(String, f64)>,
    pub base_unchanged: bool,
    pub bandwidth: f64,
}

impl AdaptorResult {
    pub fn get(&self, method: &str, split: &str) -> Option<&SplitScore> {
        self.rows.iter().find(|r| r.method == method && r.split == split)
    }
}

pub fn phi_label(phi: &PhiKind) -> String {
    match phi {
        PhiKind::Informative { noise } => format!("informative_{noise}"),
        PhiKind::Uninformative => "uninformative".into(),
    }
}

/// Trains `adaptor` with the base frozen. Returns the mean loss of the last
/// 10% of steps.
#[allow(clippy::too_many_arguments)]
pub fn train_adaptor(
    adaptor: &mut Adaptor,
    base: &FlowModel,
    base_params: &ParamSet,
    spec: &ScreenSpec,
    data: &TrainData,
    cfg: &RunConfig,
    run: &AdaptorRun,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, streams::ADAPTOR);
    let mut state = AdamState::new(&adaptor.params);
    let adam = AdamConfig {
        lr: run.lr,
        ..cfg.train.adam.clone()
    };
    let cond_dim = base.cond_dim();
    let table = base_params.get(base.embedder.pert_table);
    let tail = (run.steps / 10).max(1);
    let mut tail_sum = 0.0;
    for step in 1..=run.steps {
        let idx: Vec<usize> = (0..run.batch).map(|_| rng.random_range(0..data.len())).collect();
        let x1 = data.x.select_rows(&idx)?;
        let mut phi = Vec::with_capacity(run.batch * spec.dim);
        let mut labels = Vec::with_capacity(run.batch);
        let mut targets = Vec::with_capacity(run.batch * cond_dim);
        for &i in &idx {
            let l = &data.labels[i];
            let p = l
                .perturbation
                .ok_or_else(|| CliError::Data("adaptor training row without an id".into()))?;
            if spec.is_holdout(p) {
                return Err(CliError::Data(format!(
                    "holdout leakage: perturbation {p} in adaptor training"
                )));
            }
            phi.extend(spec.phi(p, &mut rng)?);
            labels.push(CondLabels::with_embedding(vec![0.0; cond_dim], l.context));
            targets.extend_from_slice(table.row(p));
        }
        let phi = Tensor::new(vec![run.batch, spec.dim], phi)?;
        let mut tape = Tape::new();
        let pb = base_params.bind(&mut tape, false);
        let pa = adaptor.params.bind(&mut tape, true);
        let loss = match run.objective {
            AdaptorObjective::FlowMatching => {
                let x0 = Tensor::randn(x1.shape(), &mut rng);
                let batch = fm_batch(&cfg.flow.interpolant, &x0, &x1, &mut rng)?;
                let phi_v = tape.constant(phi);
                let ext = adaptor.forward(&mut tape, &pa, phi_v, None)?;
                fm_loss(
                    &mut tape,
                    base,
                    &pb,
                    &batch,
                    &labels,
                    Some(ext),
                    &mut ForwardCtx::eval(),
                )?
            }
            AdaptorObjective::Alignment => {
                let target = Tensor::new(vec![run.batch, cond_dim], targets)?;
                adaptor.alignment_loss(&mut tape, &pa, &phi, None, &target)?
            }
        };
        let value = tape.value(loss).item()?;
        let g = tape.backward(loss)?;
        let grads = pa.vars().iter().map(|&v| g.get(v)).collect();
        adam_step(&mut adaptor.params, grads, &mut state, &adam)?;
        if step > run.steps - tail {
            tail_sum += value;
        }
    }
    Ok(tail_sum / tail as f64)
}

/// Per-condition MMD between matching `n`-row blocks, averaged.
#[allow(clippy::too_many_arguments)]
fn split_score(
    method: &str,
    split: &str,
    real: &Tensor,
    gen: &Tensor,
    n: usize,
    extractor: &dyn FeatureExtractor,
    bw: f64,
    reps: usize,
    seed: u64,
) -> Result<SplitScore> {
    let blocks = real.rows() / n;
    let mut rng = stream(seed, streams::BOOTSTRAP);
    let (mut total, mut var) = (0.0, 0.0);
    for k in 0..blocks {
        let idx: Vec<usize> = (k * n..(k + 1) * n).collect();
        let a = extractor.extract(&real.select_rows(&idx)?)?;
        let b = extractor.extract(&gen.select_rows(&idx)?)?;
        total += mmd_rbf(&a, &b, Bandwidth::Fixed(bw))?;
        let se = bootstrap_se(&a, &b, reps, &mut rng, |x, y| mmd_rbf(x, y, Bandwidth::Fixed(bw)))?;
        var += se * se;
    }
    Ok(SplitScore {
        method: method.into(),
        split: split.into(),
        mean_mmd: total / blocks as f64,
        se: var.sqrt() / blocks as f64,
        conditions: blocks,
        per_condition: n,
    })
}

/// Generates from `base` with each row's perturbation slot filled by the
/// adaptor's output for a fresh feature draw.
fn generate_adapted(
    base: &FlowModel,
    params: &ParamSet,
    adaptor: &Adaptor,
    spec: &ScreenSpec,
    grid: &[CondLabels],
    cfg: &RunConfig,
) -> Result<Tensor> {
    let mut rng = stream(cfg.seed ^ 0xADA, streams::ADAPTOR);
    let mut phi = Vec::with_capacity(grid.len() * spec.dim);
    for l in grid {
        phi.extend(spec.phi(l.perturbation.expect("grid rows carry ids"), &mut rng)?);
    }
    let emb = adaptor.apply(&Tensor::new(vec![grid.len(), spec.dim], phi)?, None)?;
    let labels: Vec<CondLabels> = grid
        .iter()
        .enumerate()
        .map(|(i, l)| CondLabels::with_embedding(emb.row(i).to_vec(), l.context))
        .collect();
    let field = WithParams { model: base, params };
    let rng = &mut stream(cfg.seed, streams::GENERATE);
    Ok(generate(&field, &labels, spec.dim, 1.0, &cfg.solver, rng)?.0)
}

pub fn run_adaptor(cfg: &RunConfig) -> Result<AdaptorResult> {
    let run = cfg
        .adaptor
        .as_ref()
        .ok_or_else(|| CliError::Config("adaptor needs an [adaptor] section".into()))?;
    if cfg.flow.construction != FlowConstruction::NoiseToData {
        return Err(CliError::Config("the adaptor base must be a noise-sourced flow".into()));
    }
    let mut out = OutDir::create(cfg, "adaptor")?;
    let screen = Screen::build(cfg)?;
    let spec = &screen.spec;
    let unseen = spec.holdout.clone();
    if unseen.is_empty() {
        return Err(CliError::Config(
            "adaptor needs held-out perturbations in screen.holdout".into(),
        ));
    }
    let seen = spec.seen();
    let data = screen.train_data(&FlowConstruction::NoiseToData)?;
    let ids = super::check_holdout(spec, &data.labels)?;
    out.audit("base", ids.clone());
    out.audit("adaptor", ids);

    let base = super::fit(cfg, &cfg.flow, &data)?;
    if let Some((step, loss)) = base.report.divergence {
        return Err(CliError::Core(phenoflow_core::Error::Divergence { step, loss }));
    }
    let frozen = base.ema.clone();
    let fingerprint = |p: &ParamSet| {
        let ckpt = Checkpoint {
            meta: String::new(),
            params: p.clone(),
        };
        sha256_hex(&ckpt.to_bytes())
    };
    let before = (fingerprint(&frozen), fingerprint(&base.model.params));
    out.write(
        "base.ckpt",
        &Checkpoint {
            meta: serde_json::json!({ "config_hash": cfg.hash(), "weights": "ema" }).to_string(),
            params: frozen.clone(),
        }
        .to_bytes(),
    )?;

    let ctxs = contexts(spec);
    let n = cfg.data.eval_per_condition;
    let extractor = cfg.metrics.extractor.build(spec.dim);
    let splits = [("seen", &seen), ("unseen", &unseen)];
    let mut reals = Vec::new();
    for (i, (_, perts)) in splits.iter().enumerate() {
        reals.push(reference(
            spec,
            perts,
            &ctxs,
            n,
            cfg.seed,
            streams::EVAL_REAL + 100 * i as u64,
        )?);
    }
    let pooled = Tensor::concat_rows(&[&reals[0], &reals[1]])?;
    let bw = resolve_bandwidth(cfg.metrics.bandwidth, &extractor.extract(&pooled)?)?;
    let reps = cfg.metrics.bootstrap_reps;

    let mut rows = Vec::new();
    let mut train_loss = Vec::new();
    for (i, (split, perts)) in splits.iter().enumerate() {
        let fresh = reference(spec, perts, &ctxs, n, cfg.seed, streams::ORACLE + 100 * i as u64)?;
        rows.push(split_score(
            "oracle",
            split,
            &reals[i],
            &fresh,
            n,
            extractor.as_ref(),
            bw,
            reps,
            cfg.seed,
        )?);
        let grid: Vec<CondLabels> = grid_labels(perts, &ctxs, n)
            .into_iter()
            .map(|l| CondLabels {
                perturbation: None,
                ..l
            })
            .collect();
        let field = WithParams {
            model: &base.model,
            params: &frozen,
        };
        let uncond = generate(
            &field,
            &grid,
            spec.dim,
            1.0,
            &cfg.solver,
            &mut stream(cfg.seed, streams::GENERATE),
        )?
        .0;
        rows.push(split_score(
            "unconditional",
            split,
            &reals[i],
            &uncond,
            n,
            extractor.as_ref(),
            bw,
            reps,
            cfg.seed,
        )?);
    }

    let kinds = if run.phi.is_empty() {
        vec![spec.phi]
    } else {
        run.phi.clone()
    };
    for phi in kinds {
        let label = phi_label(&phi);
        let mut kind_spec = spec.clone();
        kind_spec.phi = phi;
        let mut adaptor = Adaptor::new(run.adaptor_config(spec.dim, base.model.cond_dim()))?;
        let loss = train_adaptor(
            &mut adaptor,
            &base.model,
            &frozen,
            &kind_spec,
            &data,
            cfg,
            run,
            cfg.seed,
        )?;
        train_loss.push((label.clone(), loss));
        for (i, (split, perts)) in splits.iter().enumerate() {
            let grid = grid_labels(perts, &ctxs, n);
            let gen = generate_adapted(&base.model, &frozen, &adaptor, &kind_spec, &grid, cfg)?;
            rows.push(split_score(
                &label,
                split,
                &reals[i],
                &gen,
                n,
                extractor.as_ref(),
                bw,
                reps,
                cfg.seed,
            )?);
        }
    }
    let base_unchanged = before == (fingerprint(&frozen), fingerprint(&base.model.params));

    let mut csv = Csv::new("method,split,mean_mmd,se,conditions,per_condition,bandwidth", cfg);
    for r in &rows {
        csv.row(&format!(
            "{},{},{},{},{},{},{}",
            r.method,
            r.split,
            num(r.mean_mmd),
            num(r.se),
            r.conditions,
            r.per_condition,
            num(bw)
        ));
    }
    out.write("adaptor.csv", csv.as_str().as_bytes())?;
    let mut loss_csv = Csv::new("phi,final_loss", cfg);
    for (k, l) in &train_loss {
        loss_csv.row(&format!("{k},{}", num(*l)));
    }
    out.write("adaptor_loss.csv", loss_csv.as_str().as_bytes())?;
    out.finish()?;
    Ok(AdaptorResult {
        rows,
        train_loss,
        base_unchanged,
        bandwidth: bw,
    })
}
