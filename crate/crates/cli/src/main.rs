use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phenoflow::config::SampleMode;
use phenoflow::experiments::{ablation, adaptor, bound, run, stability};
use phenoflow::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "phenoflow",
    version,
    about = "Conditional flow-matching experiments on synthetic screens"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Guidance strength; repeat to sweep. Replaces the configured list.
    #[arg(long, global = true)]
    guidance: Vec<f64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<SampleMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write live and averaged checkpoints.
    Train,
    /// Sample from a trained checkpoint at each guidance strength.
    Sample,
    /// Score sample files against the reference set.
    Eval,
    /// Run the design-space matrix, and the stability matrix if configured.
    Ablate,
    /// Train adaptors for unseen perturbations and score every split.
    Adaptor,
    /// Check the embedding-error bound on random Gaussian instances.
    BoundCheck,
    /// Report parameters and per-forward FLOPs of the configured model.
    Flops,
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if !c.guidance.is_empty() {
        cfg.guidance = c.guidance.clone();
    }
    if let Some(m) = c.mode {
        cfg.sample.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::Train => {
            let path = run::run_train(cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Sample => {
            for r in run::run_sample(cfg)? {
                println!(
                    "w={} nfe={} accepted={} rejected={}",
                    r.guidance, r.nfe, r.accepted, r.rejected
                );
            }
        }
        Command::Eval => {
            for (w, s) in run::run_eval(cfg)? {
                println!(
                    "w={w} frechet={:.4e} kid={:.4e} mmd={:.4e}±{:.1e}",
                    s.report.frechet, s.report.kid, s.report.mmd_rbf, s.mmd_se
                );
            }
        }
        Command::Ablate => {
            if cfg.ablation.is_none() && cfg.stability.is_none() {
                return Err(CliError::Config(
                    "ablate needs an [ablation] or [stability] section".into(),
                ));
            }
            if cfg.ablation.is_some() {
                let r = ablation::run_ablation(cfg)?;
                println!("oracle mmd={:.4e}", r.oracle.report.mmd_rbf);
                for c in &r.cells {
                    println!(
                        "{} w={} mmd={:.4e}±{:.1e} nfe={}",
                        c.label, c.guidance, c.score.report.mmd_rbf, c.score.mmd_se, c.nfe
                    );
                }
            }
            if cfg.stability.is_some() {
                let mut cfg = cfg.clone();
                cfg.out = cfg.out.join("stability");
                let r = stability::run_stability(&cfg)?;
                for v in [stability::BASELINE, stability::DROPOUT, stability::SKIPS] {
                    println!("{v}: median steps to divergence {}", r.median_steps(v));
                }
            }
        }
        Command::Adaptor => {
            let r = adaptor::run_adaptor(cfg)?;
            for row in &r.rows {
                println!("{} {} mmd={:.4e}±{:.1e}", row.method, row.split, row.mean_mmd, row.se);
            }
            println!("base unchanged: {}", r.base_unchanged);
        }
        Command::BoundCheck => {
            let r = bound::run_bound_check(cfg)?;
            println!("holds fraction {}", bound::holds_fraction(&r));
        }
        Command::Flops => {
            let f = run::flops(cfg)?;
            println!(
                "params={} flops_per_forward={} attention_macs={} train_exaflops={}",
                f.params, f.flops_per_forward, f.attention_macs, f.train_exaflops
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match load(&cli.common).and_then(|cfg| execute(&cli.command, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("phenoflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
