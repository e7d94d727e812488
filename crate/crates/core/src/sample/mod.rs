//! Sampling from a trained velocity field: guidance, generation,
//! counterfactual editing and treatment-effect maps.

mod ode;

pub use ode::{solve_ode, Direction, SolverKind, SolverSpec, SolverStats, MIN_STEP};

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::{CondLabels, VelocityField};

/// Classifier-free guidance `v_⌀ + w·(v_c − v_⌀)`. With `w = 1` only the
/// conditional field is evaluated. Returns the velocity and the number of
/// network evaluations used.
pub fn guided_velocity<V: VelocityField + ?Sized>(
    model: &V,
    x: &Tensor,
    t: f64,
    labels: &[CondLabels],
    w: f64,
) -> Result<(Tensor, usize)> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Domain {
            what: "guidance strength",
            value: w,
            domain: "[0, ∞)",
        });
    }
    if w == 1.0 {
        return Ok((model.velocity(x, t, labels)?, 1));
    }
    let null = vec![CondLabels::null(); labels.len()];
    let vu = model.velocity(x, t, &null)?;
    if w == 0.0 {
        return Ok((vu, 1));
    }
    let vc = model.velocity(x, t, labels)?;
    let v = vu.zip_with(&vc, |u, c| u + w * (c - u))?;
    Ok((v, 2))
}

/// Integrates the guided field over the span of `spec`. `stats.nfe` counts
/// network evaluations.
pub fn integrate_guided<V: VelocityField + ?Sized>(
    model: &V,
    x_init: &Tensor,
    labels: &[CondLabels],
    w: f64,
    spec: &SolverSpec,
) -> Result<(Tensor, SolverStats)> {
    let evals = Cell::new(0usize);
    let res = solve_ode(
        |x, t| {
            let (v, n) = guided_velocity(model, x, t, labels, w)?;
            evals.set(evals.get() + n);
            Ok(v)
        },
        x_init,
        spec,
    );
    match res {
        Ok((x, mut stats)) => {
            stats.nfe = evals.get();
            Ok((x, stats))
        }
        Err(Error::Stiffness { t, h, mut stats }) => {
            stats.nfe = evals.get();
            Err(Error::Stiffness { t, h, stats })
        }
        Err(e) => Err(e),
    }
}

/// Draws Gaussian noise for each label row and integrates forward to data.
pub fn generate<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &V,
    labels: &[CondLabels],
    dim: usize,
    w: f64,
    spec: &SolverSpec,
    rng: &mut R,
) -> Result<(Tensor, SolverStats)> {
    if labels.is_empty() {
        return Err(Error::Contract("generate needs at least one label row".into()));
    }
    let x0 = Tensor::randn(&[labels.len(), dim], rng);
    let spec = SolverSpec {
        direction: Direction::Forward,
        ..*spec
    };
    integrate_guided(model, &x0, labels, w, &spec)
}

/// Conditioning used while inverting a sample to noise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseCondition {
    /// Null token for every slot (the default).
    #[default]
    Null,
    /// The sample's own labels. Non-default; gives an exact round trip
    /// when decoding with the same labels.
    Source(Vec<CondLabels>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CounterfactualStats {
    pub reverse: SolverStats,
    pub forward: SolverStats,
}

impl CounterfactualStats {
    pub fn total(&self) -> SolverStats {
        self.reverse.combine(&self.forward)
    }
}

/// Inverts `x` to noise by integrating from `t = 1` to `0`, then decodes
/// forward under `new_labels` with guidance `w`. The reverse pass is
/// unguided: with null conditioning guidance has no effect.
pub fn counterfactual<V: VelocityField + ?Sized>(
    model: &V,
    x: &Tensor,
    new_labels: &[CondLabels],
    w: f64,
    spec: &SolverSpec,
    reverse: &ReverseCondition,
) -> Result<(Tensor, CounterfactualStats)> {
    let rows = x.shape().first().copied().unwrap_or(1);
    if new_labels.len() != rows {
        return Err(shape_err(
            "counterfactual",
            format!("{} labels for {rows} samples", new_labels.len()),
        ));
    }
    let reverse_labels = match reverse {
        ReverseCondition::Null => vec![CondLabels::null(); rows],
        ReverseCondition::Source(l) => {
            if l.len() != rows {
                return Err(shape_err(
                    "counterfactual",
                    format!("{} source labels for {rows} samples", l.len()),
                ));
            }
            l.clone()
        }
    };
    let back = SolverSpec {
        direction: Direction::Reverse,
        ..*spec
    };
    let (noise, rstats) = integrate_guided(model, x, &reverse_labels, 1.0, &back)?;
    let fwd = SolverSpec {
        direction: Direction::Forward,
        ..*spec
    };
    let (out, fstats) = integrate_guided(model, &noise, new_labels, w, &fwd)?;
    Ok((
        out,
        CounterfactualStats {
            reverse: rstats,
            forward: fstats,
        },
    ))
}

/// `(counterfactual − factual)` averaged over channels. Inputs are
/// `B × (C·P)` with `C` channel planes of `P` pixels; output is `B × P`.
pub fn individual_treatment_effect(factual: &Tensor, counterfactual: &Tensor, channels: usize) -> Result<Tensor> {
    if factual.shape() != counterfactual.shape() || factual.rank() != 2 {
        return Err(shape_err(
            "individual_treatment_effect",
            format!("{:?} vs {:?}", factual.shape(), counterfactual.shape()),
        ));
    }
    let (b, f) = (factual.shape()[0], factual.shape()[1]);
    if channels == 0 || f % channels != 0 {
        return Err(shape_err(
            "individual_treatment_effect",
            format!("{f} values not divisible into {channels} channels"),
        ));
    }
    let plane = f / channels;
    let mut out = vec![0.0; b * plane];
    for i in 0..b {
        for c in 0..channels {
            for p in 0..plane {
                let j = i * f + c * plane + p;
                out[i * plane + p] += (counterfactual.data()[j] - factual.data()[j]) / channels as f64;
            }
        }
    }
    Tensor::new(vec![b, plane], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::cell::RefCell;

    fn two_valued(x: &Tensor, _t: f64, labels: &[CondLabels]) -> Result<Tensor> {
        let v = if labels[0].perturbation.is_some() { 1.0 } else { 0.0 };
        Ok(Tensor::full(x.shape(), v))
    }

    #[test]
    fn guidance_arithmetic() {
        let x = Tensor::zeros(&[1, 2]);
        let l = [CondLabels::new(0, 0)];
        let (v, n) = guided_velocity(&two_valued, &x, 0.5, &l, 1.0).unwrap();
        assert_eq!((v.data(), n), (&[1.0, 1.0][..], 1));
        let (v, _) = guided_velocity(&two_valued, &x, 0.5, &l, 0.0).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
        let (v, n) = guided_velocity(&two_valued, &x, 0.5, &l, 2.0).unwrap();
        assert_eq!((v.data(), n), (&[2.0, 2.0][..], 2));
        assert!(guided_velocity(&two_valued, &x, 0.5, &l, -1.0).is_err());
    }

    #[test]
    fn reverse_pass_uses_only_null_labels() {
        let log: RefCell<Vec<CondLabels>> = RefCell::new(Vec::new());
        let field = |x: &Tensor, _t: f64, labels: &[CondLabels]| -> Result<Tensor> {
            log.borrow_mut().push(labels[0].clone());
            Ok(x.scale(0.3))
        };
        let x = Tensor::full(&[1, 2], 0.5);
        let spec = SolverSpec::dopri5(1e-5, 1e-5);
        let (_, stats) = counterfactual(
            &field,
            &x,
            &[CondLabels::new(1, 0)],
            1.0,
            &spec,
            &ReverseCondition::Null,
        )
        .unwrap();
        let calls = log.borrow();
        assert_eq!(calls.len(), stats.total().nfe);
        assert!(calls[..stats.reverse.nfe].iter().all(|l| *l == CondLabels::null()));
        assert!(calls[stats.reverse.nfe..].iter().all(|l| l.perturbation == Some(1)));
    }

    #[test]
    fn ite_cases() {
        let a = Tensor::randn(&[2, 12], &mut seeded(0));
        assert_eq!(individual_treatment_effect(&a, &a, 3).unwrap(), Tensor::zeros(&[2, 4]));
        let b = a.map(|v| v + 1.0);
        let ite = individual_treatment_effect(&a, &b, 3).unwrap();
        assert!(ite.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(individual_treatment_effect(&a, &Tensor::zeros(&[2, 11]), 3).is_err());
    }

    #[test]
    fn generate_is_seeded() {
        let field = |x: &Tensor, _t: f64, _l: &[CondLabels]| -> Result<Tensor> { Ok(x.scale(-0.5)) };
        let labels = vec![CondLabels::null(); 4];
        let spec = SolverSpec::dopri5(1e-5, 1e-5);
        let (a, _) = generate(&field, &labels, 3, 1.0, &spec, &mut seeded(5)).unwrap();
        let (b, _) = generate(&field, &labels, 3, 1.0, &spec, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
    }
}
