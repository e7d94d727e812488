use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phenoflow::experiments::{check_holdout, run};
use phenoflow::{CliError, RunConfig};
use phenoflow_core::data::{decode_tensor, ScreenConfig, ScreenSpec};
use phenoflow_core::model::CondLabels;
use phenoflow_core::Error;

const SMALL: &str = r#"
seed = 3
guidance = [1.0, 1.5]

[data]
train_per_condition = 50
controls_per_context = 5
eval_per_condition = 40

[train]
batch = 64
steps = 150

[solver.kind]
kind = "dopri5"
rtol = 1e-4
atol = 1e-4
"#;

fn phenoflow(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenoflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn phenoflow")
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 1\nlearning_rate = 0.1\n");
    let o = phenoflow(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = phenoflow(&["sample"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("ema.ckpt"), "{}", stderr(&o));
}

#[test]
fn ablation_names_the_cell_with_a_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}\n[ablation]\ntrain_inline = false\n\n[[ablation.cells]]\nlabel = \"from_disk\"\ncheckpoint = \"{}\"\nflow = {{ interpolant = {{ kind = \"linear\" }}, construction = {{ kind = \"noise_to_data\" }} }}\n",
        dir.path().join("nope.ckpt").display()
    );
    let cfg = write_config(dir.path(), "ablate.toml", &text);
    let o = phenoflow(&["ablate"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("from_disk"), "{}", stderr(&o));
}

#[test]
fn train_sample_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for cmd in ["train", "sample", "eval"] {
            let o = phenoflow(&[cmd], &cfg_path, out);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
    }
    for f in [
        "live.ckpt",
        "ema.ckpt",
        "manifest_train.json",
        "manifest_sample.json",
        "manifest_eval.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    for f in [
        "loss.csv",
        "nfe.csv",
        "metrics.csv",
        "ema.ckpt",
        "samples_generate_w1.5.flt",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs between runs"
        );
    }

    let cfg = RunConfig::load(&cfg_path).unwrap();
    let hash = cfg.hash();
    for f in ["loss.csv", "nfe.csv", "metrics.csv"] {
        let text = fs::read_to_string(a.join(f)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().ends_with(",config_hash"), "{f}");
        assert!(lines.all(|l| l.ends_with(&hash)), "{f}");
    }

    // Three treatments, two contexts, 40 rows each.
    let samples = decode_tensor(&fs::read(a.join("samples_generate_w1.flt")).unwrap()).unwrap();
    assert_eq!(samples.shape(), &[240, 2]);
    assert!(samples.data().iter().all(|v| v.is_finite()));

    let real = decode_tensor(&fs::read(a.join("reference.flt")).unwrap()).unwrap();
    let own = run::evaluate_pair(&cfg, &real, &real).unwrap();
    assert!(own.report.frechet < 1e-8, "{}", own.report.frechet);
    assert_eq!(own.report.mmd_rbf, 0.0);
}

#[test]
fn counterfactual_mode_roughly_doubles_nfe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("run");
    assert!(phenoflow(&["train"], &cfg, &out).status.success());
    let nfe = |mode: &str| -> f64 {
        let o = phenoflow(&["sample", "--guidance", "1", "--mode", mode], &cfg, &out);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = fs::read_to_string(out.join("nfe.csv")).unwrap();
        csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    let ratio = nfe("counterfactual") / nfe("generate");
    assert!((1.6..=2.4).contains(&ratio), "{ratio}");
}

#[test]
fn bridge_with_large_noise_trains_to_a_higher_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut losses = Vec::new();
    for (name, interp) in [
        ("linear", "{ kind = \"linear\" }"),
        ("bridge", "{ kind = \"brownian_bridge\", k = 1.0 }"),
    ] {
        let text = format!("{SMALL}\n[flow]\ninterpolant = {interp}\nconstruction = {{ kind = \"noise_to_data\" }}\n")
            .replace("steps = 150", "steps = 600");
        let cfg_path = write_config(dir.path(), &format!("{name}.toml"), &text);
        let mut cfg = RunConfig::load(&cfg_path).unwrap();
        cfg.out = dir.path().join(name);
        run::run_train(&cfg).unwrap();
        let trace = fs::read_to_string(cfg.out.join("loss.csv")).unwrap();
        let tail: Vec<f64> = trace
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let last = &tail[tail.len() - 100..];
        losses.push(last.iter().sum::<f64>() / last.len() as f64);
    }
    assert!(losses[1] > 2.0 * losses[0], "linear {} bridge {}", losses[0], losses[1]);
}

#[test]
fn xl_flops_near_one_teraflop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/xl_flops.toml");
    let o = phenoflow(&["flops"], &cfg, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |k: &str| -> f64 {
        text.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let flops = field("flops_per_forward");
    assert!((flops / 1e12 - 1.0).abs() < 0.15, "{flops}");
    let params = field("params");
    assert!((params / 700e6 - 1.0).abs() < 0.15, "{params}");
}

#[test]
fn holdout_ids_in_training_labels_are_rejected() {
    let mut sc = ScreenConfig::new(2, 5, 2, 0);
    sc.holdout = vec![3];
    let spec = ScreenSpec::from_config(&sc).unwrap();
    let clean = [CondLabels::new(1, 0), CondLabels::new(2, 1)];
    assert_eq!(check_holdout(&spec, &clean).unwrap(), vec![1, 2]);
    let leaked = [CondLabels::new(1, 0), CondLabels::new(3, 1)];
    assert!(matches!(check_holdout(&spec, &leaked), Err(CliError::Data(_))));
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    assert_eq!(
        CliError::Core(Error::Divergence {
            step: 3,
            loss: f64::NAN
        })
        .exit_code(),
        3
    );
    assert_eq!(CliError::Data("x".into()).exit_code(), 4);
}
