use phenoflow_core::model::{
    Adaptor, AdaptorConfig, Architecture, CondLabels, ConditionEmbedder, FlowModel, ForwardCtx, MitConfig, MlpConfig,
    ModelConfig, ParamSet, VelocityField, COND_DROPOUT,
};
use phenoflow_core::rng::seeded;
use phenoflow_core::train::{adam_step, AdamConfig, AdamState};
use phenoflow_core::{Tape, Tensor};

fn mit_model(cfg: MitConfig, seed: u64) -> FlowModel {
    FlowModel::new(ModelConfig {
        arch: Architecture::Mit(cfg),
        n_pert: 3,
        n_ctx: 2,
        cond_dim: 16,
        init_seed: seed,
    })
    .unwrap()
}

fn mixed_labels(n: usize) -> Vec<CondLabels> {
    (0..n)
        .map(|i| match i % 4 {
            0 => CondLabels::null(),
            _ => CondLabels::new(i % 3, i % 2),
        })
        .collect()
}

#[test]
fn condition_dropout_rate() {
    let mut params = ParamSet::new();
    let e = ConditionEmbedder::new(&mut params, 4, 3, 8, &mut seeded(0));
    let mut ctx = ForwardCtx::train(7, COND_DROPOUT);
    let keep = e.keep_mask(100_000, &mut ctx);
    let n = keep.len() as f64;
    let pert = keep.iter().filter(|k| !k.0).count() as f64 / n;
    let context = keep.iter().filter(|k| !k.1).count() as f64 / n;
    assert!((0.14..=0.16).contains(&pert), "perturbation drop rate {pert}");
    assert!((0.14..=0.16).contains(&context), "context drop rate {context}");
}

#[test]
fn toy_transformer_shape_and_zero_init() {
    let m = mit_model(MitConfig::toy(6, 8, 8), 0);
    let x = Tensor::randn(&[3, 6 * 8 * 8], &mut seeded(1));
    let v = m.velocity(&x, 0.4, &mixed_labels(3)).unwrap();
    assert_eq!(v.shape(), x.shape());
    assert_eq!(v, Tensor::zeros(x.shape()));
}

#[test]
fn eval_mode_is_bitwise_stable() {
    let mut cfg = MitConfig::toy(2, 4, 4);
    cfg.zero_init = false;
    let m = mit_model(cfg, 3);
    let x = Tensor::randn(&[4, 32], &mut seeded(2));
    let a = m.velocity(&x, 0.3, &mixed_labels(4)).unwrap();
    let b = m.velocity(&x, 0.3, &mixed_labels(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn long_skips_are_live() {
    let mut cfg = MitConfig::toy(2, 4, 4);
    cfg.zero_init = false;
    let with = mit_model(cfg.clone(), 5);
    cfg.use_long_skips = false;
    let without = mit_model(cfg, 5);
    let x = Tensor::randn(&[2, 32], &mut seeded(4));
    let a = with.velocity(&x, 0.5, &mixed_labels(2)).unwrap();
    let b = without.velocity(&x, 0.5, &mixed_labels(2)).unwrap();
    assert_eq!(a.shape(), b.shape());
    assert!(a.sub(&b).unwrap().max_abs() > 1e-6);
}

fn grads_of(m: &FlowModel, rows: usize) -> Vec<Tensor> {
    let mut rng = seeded(9);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, true);
    let x = tape.constant(Tensor::randn(&[rows, m.sample_dim()], &mut rng));
    let times: Vec<f64> = (0..rows).map(|i| (i as f64 + 0.5) / rows as f64).collect();
    let v = m
        .forward(
            &mut tape,
            &p,
            x,
            &times,
            &mixed_labels(rows),
            None,
            &mut ForwardCtx::eval(),
        )
        .unwrap();
    let target = tape.constant(Tensor::randn(&[rows, m.sample_dim()], &mut rng));
    let loss = tape.mse(v, target).unwrap();
    let g = tape.backward(loss).unwrap();
    p.vars().iter().map(|&v| g.get(v)).collect()
}

#[test]
fn every_parameter_gets_gradient() {
    let mut cfg = MitConfig::toy(2, 4, 4);
    cfg.zero_init = false;
    let m = mit_model(cfg, 6);
    for (id, g) in m.params.ids().zip(grads_of(&m, 8)) {
        assert!(g.max_abs() > 0.0, "{} has zero gradient", m.params.name(id));
    }
}

#[test]
fn zero_init_blocks_gradient_upstream_at_step_zero() {
    let m = mit_model(MitConfig::toy(2, 4, 4), 6);
    let grads = grads_of(&m, 8);
    for (id, g) in m.params.ids().zip(&grads) {
        let name = m.params.name(id);
        let zero_layer = name.contains(".ada.") || name.starts_with("mit.final.");
        if zero_layer {
            continue;
        }
        // Everything upstream of the zero output projection is cut off.
        assert_eq!(g.max_abs(), 0.0, "{name}");
    }
    let out_w = m.params.ids().find(|&i| m.params.name(i) == "mit.final.out.w").unwrap();
    assert!(grads[out_w.index()].max_abs() > 0.0);
}

#[test]
fn transformer_counts_match_tape_trace() {
    let mut cfg = MitConfig::toy(2, 4, 8);
    cfg.depth = 2;
    let m = mit_model(cfg, 0);
    let (dense, attention) = m.macs_per_sample();
    let rows = 3;
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[rows, m.sample_dim()]));
    m.forward(
        &mut tape,
        &p,
        x,
        &[0.2; 3],
        &mixed_labels(rows),
        None,
        &mut ForwardCtx::eval(),
    )
    .unwrap();
    assert_eq!(tape.macs().dense, rows as u64 * dense);
    assert_eq!(tape.macs().activation, rows as u64 * attention);
}

#[test]
fn xl_transformer_is_about_one_teraflop() {
    let cfg = ModelConfig {
        arch: Architecture::Mit(MitConfig::xl2(6, 96, 96)),
        n_pert: 1138,
        n_ctx: 51,
        cond_dim: 16,
        init_seed: 0,
    };
    let (params, flops) = cfg.analytic_counts();
    let rel = (flops as f64 - 1e12).abs() / 1e12;
    println!("MiT-XL/2 on 6×96×96: {params} parameters, {flops} MACs per forward ({rel:.3} from 1e12)");
    assert!(rel < 0.15);
    assert!((6e8..8e8).contains(&(params as f64)));
}

#[test]
fn linear_adaptor_realizes_identity_embeddings() {
    let dim = 5;
    let mut a = Adaptor::new(AdaptorConfig {
        in_dim: dim,
        out_dim: dim,
        hidden: 0,
        layers: 0,
        dose_features: 0,
        init_seed: 2,
    })
    .unwrap();
    let phi = Tensor::randn(&[12, dim], &mut seeded(8));
    let mut state = AdamState::new(&a.params);
    let adam = AdamConfig {
        lr: 1e-2,
        clip_norm: 0.0,
        ..AdamConfig::default()
    };
    let mut loss = f64::INFINITY;
    for _ in 0..4000 {
        let mut tape = Tape::new();
        let p = a.params.bind(&mut tape, true);
        let l = a.alignment_loss(&mut tape, &p, &phi, None, &phi).unwrap();
        loss = tape.value(l).item().unwrap();
        let g = tape.backward(l).unwrap();
        let grads = p.vars().iter().map(|&v| g.get(v)).collect();
        adam_step(&mut a.params, grads, &mut state, &adam).unwrap();
    }
    assert!(loss < 1e-10, "alignment loss {loss}");
    // The exact identity map has zero loss.
    let ids: Vec<_> = a.params.ids().collect();
    let mut eye = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        eye.data_mut()[i * dim + i] = 1.0;
    }
    *a.params.get_mut(ids[0]) = eye;
    *a.params.get_mut(ids[1]) = Tensor::zeros(&[dim]);
    assert_eq!(a.apply(&phi, None).unwrap(), phi);
}

#[test]
fn mlp_velocity_matches_declared_width() {
    let m = FlowModel::new(ModelConfig {
        arch: Architecture::Mlp(MlpConfig {
            dim: 7,
            hidden: 16,
            layers: 3,
            time_dim: 8,
            zero_init_out: false,
        }),
        n_pert: 3,
        n_ctx: 2,
        cond_dim: 8,
        init_seed: 1,
    })
    .unwrap();
    let x = Tensor::randn(&[5, 7], &mut seeded(0));
    assert_eq!(m.velocity(&x, 0.1, &mixed_labels(5)).unwrap().shape(), &[5, 7]);
}
