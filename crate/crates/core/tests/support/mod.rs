//! Oracles shared by the test targets of this workspace.

#![allow(dead_code)]

use itertools::Itertools;
use phenoflow_core::autodiff::{grad_check, grad_check_extrapolated, Tape, Tensor, Var};
use phenoflow_core::interpolant::Interpolant;
use phenoflow_core::model::{Architecture, CondLabels, FlowModel, ForwardCtx, MitConfig, MlpConfig, ModelConfig};
use phenoflow_core::rng::seeded;
use phenoflow_core::sample::{solve_ode, SolverSpec};
use phenoflow_core::train::{fm_batch, fm_loss};
use phenoflow_core::Result;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
pub type Checker = fn(&dyn Fn(&mut Tape, Var) -> Result<Var>, &Tensor) -> Result<f64>;

pub fn central(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    grad_check(f, x, H)
}

/// The transformer at a random non-zero initialisation is strongly curved,
/// so it is checked against the extrapolated difference at a wider step.
pub fn extrapolated(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    grad_check_extrapolated(f, x, 1e-3)
}

/// Reduces an output to a scalar through fixed random weights so that no
/// coordinate gets a structurally zero gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y), &mut seeded(seed ^ 0xABCD));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

pub fn op_cases(m: usize, n: usize, seed: u64) -> Vec<(&'static str, Case)> {
    let c = move |shape: &[usize], k: u64| Tensor::randn(shape, &mut seeded(seed * 31 + k));
    let other = c(&[m, n], 1);
    let row = c(&[n], 2);
    let right = c(&[n, 3], 3);
    let left = c(&[2, m], 4);
    let gain = c(&[n], 5);
    let other2 = other.clone();
    let row2 = row.clone();
    let gain2 = gain.clone();
    vec![
        (
            "add",
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = t.add(x, o)?;
                project(t, y, seed)
            }),
        ),
        (
            "add_self",
            Box::new(move |t, x| {
                let y = t.add(x, x)?;
                project(t, y, seed)
            }),
        ),
        (
            "sub",
            Box::new(move |t, x| {
                let o = t.constant(other2.clone());
                let y = t.sub(o, x)?;
                project(t, y, seed)
            }),
        ),
        (
            "mul",
            Box::new(move |t, x| {
                let y = t.mul(x, x)?;
                project(t, y, seed)
            }),
        ),
        (
            "mul_row",
            Box::new(move |t, x| {
                let r = t.constant(row.clone());
                let y = t.mul(x, r)?;
                project(t, y, seed)
            }),
        ),
        (
            "mul_row_grad_into_row",
            Box::new(move |t, x| {
                let w = t.constant(Tensor::randn(&[4, n], &mut seeded(seed)));
                let r = t.slice_last(x, 0, n)?;
                let r = t.gather_rows(r, &[0])?;
                let y = t.mul(w, r)?;
                project(t, y, seed)
            }),
        ),
        (
            "scale",
            Box::new(move |t, x| {
                let y = t.scale(x, -1.7)?;
                project(t, y, seed)
            }),
        ),
        (
            "matmul_left",
            Box::new(move |t, x| {
                let r = t.constant(right.clone());
                let y = t.matmul(x, r)?;
                project(t, y, seed)
            }),
        ),
        (
            "matmul_right",
            Box::new(move |t, x| {
                let l = t.constant(left.clone());
                let y = t.matmul(l, x)?;
                project(t, y, seed)
            }),
        ),
        (
            "matmul_gram",
            Box::new(move |t, x| {
                let xt = t.transpose(x)?;
                let y = t.matmul(x, xt)?;
                project(t, y, seed)
            }),
        ),
        (
            "gelu",
            Box::new(move |t, x| {
                let y = t.gelu(x)?;
                project(t, y, seed)
            }),
        ),
        (
            "silu",
            Box::new(move |t, x| {
                let y = t.silu(x)?;
                project(t, y, seed)
            }),
        ),
        (
            "softmax",
            Box::new(move |t, x| {
                let y = t.softmax(x)?;
                project(t, y, seed)
            }),
        ),
        (
            "rmsnorm",
            Box::new(move |t, x| {
                let g = t.constant(gain.clone());
                let y = t.rmsnorm(x, g)?;
                project(t, y, seed)
            }),
        ),
        (
            "rmsnorm_gain",
            Box::new(move |t, x| {
                let g = t.slice_last(x, 0, n)?;
                let g = t.gather_rows(g, &[m - 1])?;
                let g = t.reshape(g, vec![n])?;
                let z = t.constant(Tensor::randn(&[3, n], &mut seeded(seed + 9)));
                let y = t.rmsnorm(z, g)?;
                project(t, y, seed)
            }),
        ),
        (
            "layernorm",
            Box::new(move |t, x| {
                let g = t.constant(gain2.clone());
                let y = t.layernorm(x, g)?;
                project(t, y, seed)
            }),
        ),
        (
            "dropout_train",
            Box::new(move |t, x| {
                let y = t.dropout(x, 0.3, true, seed, 7)?;
                project(t, y, seed)
            }),
        ),
        (
            "concat_last",
            Box::new(move |t, x| {
                let g = t.gelu(x)?;
                let y = t.concat_last(&[x, g, x])?;
                project(t, y, seed)
            }),
        ),
        (
            "concat_rows",
            Box::new(move |t, x| {
                let s = t.silu(x)?;
                let y = t.concat_rows(&[s, x])?;
                project(t, y, seed)
            }),
        ),
        (
            "gather_repeat",
            Box::new(move |t, x| {
                let k = m * n;
                let idx: Vec<usize> = (0..2 * k).map(|i| (i * 7 + 3) % k).collect();
                let y = t.gather(x, idx, vec![2, k])?;
                project(t, y, seed)
            }),
        ),
        (
            "reshape",
            Box::new(move |t, x| {
                let y = t.reshape(x, vec![n, m])?;
                let y = t.softmax(y)?;
                project(t, y, seed)
            }),
        ),
        (
            "mean_all",
            Box::new(move |t, x| {
                let y = t.mul(x, x)?;
                t.mean_all(y)
            }),
        ),
        (
            "mse",
            Box::new(move |t, x| {
                let r = t.constant(row2.clone());
                let z = t.mul(x, r)?;
                t.mse(z, x)
            }),
        ),
        (
            "affine",
            Box::new(move |t, x| {
                let w = t.constant(Tensor::randn(&[n, 2], &mut seeded(seed + 3)));
                let b = t.constant(Tensor::randn(&[2], &mut seeded(seed + 4)));
                let y = t.affine(x, w, b)?;
                project(t, y, seed)
            }),
        ),
    ]
}

pub fn labels_for(b: usize, seed: u64) -> Vec<CondLabels> {
    let mut rng = seeded(seed + 100);
    (0..b)
        .map(|i| match i % 3 {
            0 => CondLabels::null(),
            _ => CondLabels::new(rng.random_range(0..3), rng.random_range(0..2)),
        })
        .collect()
}

/// Largest relative error over every parameter tensor of `model`.
pub fn model_grad_error(model: &FlowModel, rows: usize, seed: u64, check: Checker) -> f64 {
    let mut rng = seeded(seed);
    let d = model.sample_dim();
    let x0 = Tensor::randn(&[rows, d], &mut rng);
    let x1 = Tensor::randn(&[rows, d], &mut rng);
    let batch = fm_batch(&Interpolant::Linear, &x0, &x1, &mut rng).unwrap();
    let labels = labels_for(rows, seed);
    let mut worst: f64 = 0.0;
    for id in model.params.ids() {
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let p = model.params.bind_with(tape, false, id, v)?;
            fm_loss(tape, model, &p, &batch, &labels, None, &mut ForwardCtx::eval())
        };
        let err = check(&f, model.params.get(id)).unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Small MLP whose depth cycles with the seed.
pub fn small_mlp(seed: u64) -> FlowModel {
    FlowModel::new(ModelConfig {
        arch: Architecture::Mlp(MlpConfig {
            dim: 3,
            hidden: 8,
            layers: 2 + (seed as usize % 3),
            time_dim: 4,
            zero_init_out: false,
        }),
        n_pert: 3,
        n_ctx: 2,
        cond_dim: 4,
        init_seed: seed,
    })
    .unwrap()
}

pub fn tiny_transformer(seed: u64) -> FlowModel {
    let mut cfg = MitConfig::toy(2, 4, 4);
    cfg.depth = 2;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.time_dim = 4;
    cfg.zero_init = false;
    cfg.use_rmsnorm = seed.is_multiple_of(2);
    cfg.ada_rms = seed % 4 == 1;
    cfg.block_skip = seed.is_multiple_of(3);
    FlowModel::new(ModelConfig {
        arch: Architecture::Mit(cfg),
        n_pert: 3,
        n_ctx: 2,
        cond_dim: 8,
        init_seed: seed,
    })
    .unwrap()
}

/// Worst relative error of every registered op over 20 random shapes.
pub fn worst_op_error() -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..20u64 {
        let mut rng = seeded(seed);
        let (m, n) = (rng.random_range(2..5), rng.random_range(2..6));
        let x = Tensor::randn(&[m, n], &mut rng);
        for (name, f) in op_cases(m, n, seed) {
            let err = grad_check(&f, &x, H).unwrap();
            if err.is_nan() || err > worst.0 {
                worst = (err, format!("{name} seed {seed}"));
            }
        }
    }
    worst
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum assignment cost over every permutation.
pub fn brute_force_ot(x0: &Tensor, x1: &Tensor) -> f64 {
    let n = x0.shape()[0];
    (0..n)
        .permutations(n)
        .map(|p| (0..n).map(|i| sq(x0.row(i), x1.row(p[i]))).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Direct weighted average with weights `(i/T)^(γ+1) − ((i−1)/T)^(γ+1)`.
pub fn power_average(trace: &[f64], gamma: f64) -> f64 {
    let t = trace.len() as f64;
    let a = gamma + 1.0;
    trace
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let i = (i + 1) as f64;
            ((i / t).powf(a) - ((i - 1.0) / t).powf(a)) * v
        })
        .sum()
}

pub fn exp_growth(x: &Tensor, _t: f64) -> Result<Tensor> {
    Ok(x.clone())
}

/// Rotation `x' = (−2π y, 2π x)`: one full turn over `[0, 1]`.
pub fn rotation(x: &Tensor, _t: f64) -> Result<Tensor> {
    let d = x.data();
    let w = 2.0 * std::f64::consts::PI;
    Ok(Tensor::from_vec(vec![-w * d[1], w * d[0]]))
}

/// Slope of log error against log NFE over a tolerance ladder.
pub fn empirical_order(f: fn(&Tensor, f64) -> Result<Tensor>, x0: &Tensor, exact: &Tensor) -> f64 {
    let mut pts = Vec::new();
    for k in 3..=10 {
        let tol = 10f64.powi(-k);
        let (x, stats) = solve_ode(f, x0, &SolverSpec::dopri5(tol, tol)).unwrap();
        let err = x.sub(exact).unwrap().max_abs();
        pts.push(((stats.nfe as f64).ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}
