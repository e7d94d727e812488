use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::interpolant::Interpolant;
use crate::model::{Bound, CondLabels, FlowModel, ForwardCtx};

/// Interpolated inputs, per-row times and regression targets for one batch.
#[derive(Clone, Debug)]
pub struct FmBatch {
    pub xt: Tensor,
    pub times: Vec<f64>,
    pub target: Tensor,
}

/// Draws one time and one noise row per sample and evaluates the path and
/// its velocity. `x0` and `x1` are `B × F`.
pub fn fm_batch<R: Rng + ?Sized>(ip: &Interpolant, x0: &Tensor, x1: &Tensor, rng: &mut R) -> Result<FmBatch> {
    if x0.shape() != x1.shape() || x0.rank() != 2 {
        return Err(shape_err("fm_batch", format!("{:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let (b, f) = (x0.shape()[0], x0.shape()[1]);
    let mut xt = Vec::with_capacity(b * f);
    let mut target = Vec::with_capacity(b * f);
    let mut times = Vec::with_capacity(b);
    for i in 0..b {
        let t = ip.sample_time(rng);
        let eps: Vec<f64> = if ip.uses_noise() {
            (0..f).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; f]
        };
        let eps = Tensor::new(vec![1, f], eps)?;
        let r0 = Tensor::new(vec![1, f], x0.row(i).to_vec())?;
        let r1 = Tensor::new(vec![1, f], x1.row(i).to_vec())?;
        xt.extend_from_slice(ip.interpolate(&r0, &r1, t, &eps)?.data());
        target.extend_from_slice(ip.target_velocity(&r0, &r1, t, &eps)?.data());
        times.push(t.get());
    }
    Ok(FmBatch {
        xt: Tensor::new(vec![b, f], xt)?,
        times,
        target: Tensor::new(vec![b, f], target)?,
    })
}

/// Mean over all elements of `(v(x_t, t) − target)²` for an arbitrary
/// evaluator taking per-row times.
pub fn fm_loss_with<F>(batch: &FmBatch, v: F) -> Result<f64>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    let pred = v(&batch.xt, &batch.times)?;
    let diff = pred.sub(&batch.target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.numel() as f64)
}

/// Records the flow-matching loss of `model` on `batch`.
pub fn fm_loss(
    tape: &mut Tape,
    model: &FlowModel,
    p: &Bound,
    batch: &FmBatch,
    labels: &[CondLabels],
    external: Option<Var>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let x = tape.constant(batch.xt.clone());
    let v = model.forward(tape, p, x, &batch.times, labels, external, ctx)?;
    let target = tape.constant(batch.target.clone());
    tape.mse(v, target)
}

/// Row-wise exact target for tests: returns the target of the row with the
/// same `x_t` (only meaningful when called on the batch it was built from).
pub fn oracle_for(batch: &FmBatch) -> impl Fn(&Tensor, &[f64]) -> Result<Tensor> + '_ {
    move |x: &Tensor, _t: &[f64]| {
        if x != &batch.xt {
            return Err(shape_err("oracle", "queried off its own batch"));
        }
        Ok(batch.target.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn oracle_has_zero_loss_for_all_paths() {
        let mut rng = seeded(2);
        let x0 = Tensor::randn(&[16, 3], &mut rng);
        let x1 = Tensor::randn(&[16, 3], &mut rng);
        for ip in [
            Interpolant::Linear,
            Interpolant::VariancePreserving,
            Interpolant::BrownianBridge { k: 1.0 },
        ] {
            let b = fm_batch(&ip, &x0, &x1, &mut rng).unwrap();
            assert_eq!(fm_loss_with(&b, oracle_for(&b)).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_model_on_linear_matches_expected_gap() {
        let mut rng = seeded(3);
        let n = 100_000;
        let x0 = Tensor::randn(&[n, 2], &mut rng);
        let x1 = Tensor::randn(&[n, 2], &mut rng).map(|v| 2.0 * v + 1.0);
        let b = fm_batch(&Interpolant::Linear, &x0, &x1, &mut rng).unwrap();
        let loss = fm_loss_with(&b, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
        // E(x1 − x0)² per coordinate = 1 + 4 + 1.
        assert!((loss - 6.0).abs() / 6.0 < 0.02, "{loss}");
    }

    #[test]
    fn times_match_path_domain() {
        let mut rng = seeded(4);
        let x = Tensor::zeros(&[500, 1]);
        let b = fm_batch(&Interpolant::BrownianBridge { k: 0.1 }, &x, &x, &mut rng).unwrap();
        assert!(b.times.iter().all(|&t| (1e-3..=1.0 - 1e-3).contains(&t)));
    }
}
