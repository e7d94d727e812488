//! Fixed-step Euler and adaptive Dormand–Prince 5(4) integration.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Smallest step magnitude before the solver gives up.
pub const MIN_STEP: f64 = 1e-10;
const MAX_STEPS: usize = 1_000_000;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
/// PI exponents: `err^(−ALPHA) · err_prev^(BETA)`.
const ALPHA: f64 = 0.17;
const BETA: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverKind {
    Euler { n_steps: usize },
    Dopri5 { rtol: f64, atol: f64 },
}

impl Default for SolverKind {
    fn default() -> Self {
        Self::Dopri5 { rtol: 1e-5, atol: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `t` from 0 to 1.
    #[default]
    Forward,
    /// `t` from 1 to 0.
    Reverse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub kind: SolverKind,
    #[serde(default)]
    pub direction: Direction,
}

impl SolverSpec {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Dopri5 { rtol, atol },
            direction: Direction::Forward,
        }
    }

    pub fn euler(n_steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler { n_steps },
            direction: Direction::Forward,
        }
    }

    pub fn reversed(self) -> Self {
        Self {
            direction: match self.direction {
                Direction::Forward => Direction::Reverse,
                Direction::Reverse => Direction::Forward,
            },
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Euler { n_steps: 0 } => Err(Error::Contract("euler needs at least one step".into())),
            SolverKind::Dopri5 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => Err(Error::Domain {
                what: "solver tolerance",
                value: rtol.min(atol),
                domain: "(0, ∞)",
            }),
            _ => Ok(()),
        }
    }

    fn span(&self) -> (f64, f64) {
        match self.direction {
            Direction::Forward => (0.0, 1.0),
            Direction::Reverse => (1.0, 0.0),
        }
    }
}

/// Work done by one solve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolverStats {
    /// Velocity evaluations. Callers that combine several network
    /// evaluations per call (guidance) rescale this to network evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Time reached when the solve ended.
    pub t_reached: f64,
}

impl SolverStats {
    pub fn combine(&self, other: &SolverStats) -> SolverStats {
        SolverStats {
            nfe: self.nfe + other.nfe,
            accepted: self.accepted + other.accepted,
            rejected: self.rejected + other.rejected,
            t_reached: other.t_reached,
        }
    }
}

/// Integrates `dx/dt = f(x, t)` from `x_init` over the span set by `spec`.
pub fn solve_ode<F>(mut f: F, x_init: &Tensor, spec: &SolverSpec) -> Result<(Tensor, SolverStats)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    spec.validate()?;
    let (t0, t1) = spec.span();
    let mut stats = SolverStats {
        t_reached: t0,
        ..Default::default()
    };
    let mut eval = |x: &Tensor, t: f64, stats: &mut SolverStats| -> Result<Tensor> {
        stats.nfe += 1;
        let v = f(x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::Contract(format!(
                "velocity of shape {:?} for state {:?}",
                v.shape(),
                x.shape()
            )));
        }
        if !v.is_finite() {
            return Err(Error::Numeric { op: "velocity" });
        }
        Ok(v)
    };
    match spec.kind {
        SolverKind::Euler { n_steps } => {
            let h = (t1 - t0) / n_steps as f64;
            let mut x = x_init.clone();
            for i in 0..n_steps {
                let t = t0 + i as f64 * h;
                let v = eval(&x, t, &mut stats)?;
                x = x.axpy(h, &v)?;
                stats.accepted += 1;
            }
            stats.t_reached = t1;
            Ok((x, stats))
        }
        SolverKind::Dopri5 { rtol, atol } => dopri5(&mut eval, x_init, t0, t1, rtol, atol, stats),
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn combo(x: &Tensor, h: f64, coeffs: &[f64], ks: &[Tensor]) -> Tensor {
    let mut out = x.clone();
    for (&c, k) in coeffs.iter().zip(ks) {
        if c != 0.0 {
            for (o, &kv) in out.data_mut().iter_mut().zip(k.data()) {
                *o += h * c * kv;
            }
        }
    }
    out
}

/// Root-mean-square of `v / (atol + rtol·max(|a|, |b|))`.
fn scaled_rms(v: &[f64], a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&e, (&x, &y))| {
            let sc = atol + rtol * x.abs().max(y.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn dopri5<F>(
    eval: &mut F,
    x_init: &Tensor,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    mut stats: SolverStats,
) -> Result<(Tensor, SolverStats)>
where
    F: FnMut(&Tensor, f64, &mut SolverStats) -> Result<Tensor>,
{
    let span = t1 - t0;
    let dir = span.signum();
    let mut t = t0;
    let mut x = x_init.clone();
    let mut k1 = eval(&x, t, &mut stats)?;

    // Initial step from the local scale of the solution and its derivative.
    let d0 = scaled_rms(x.data(), x.data(), x.data(), rtol, atol);
    let d1 = scaled_rms(k1.data(), x.data(), x.data(), rtol, atol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let probe = x.axpy(dir * h, &k1)?;
    let k_probe = eval(&probe, t + dir * h, &mut stats)?;
    let diff: Vec<f64> = k_probe.data().iter().zip(k1.data()).map(|(a, b)| a - b).collect();
    let d2 = scaled_rms(&diff, x.data(), x.data(), rtol, atol) / h;
    h = if d1.max(d2) <= 1e-15 {
        span.abs()
    } else {
        (100.0 * h).min((0.01 / d1.max(d2)).powf(0.2))
    };
    h = h.min(span.abs());

    let mut err_prev: f64 = 1e-4;
    let mut ks: Vec<Tensor> = Vec::with_capacity(7);
    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= MAX_STEPS {
            return Err(Error::Stiffness { t, h, stats });
        }
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        if step < MIN_STEP {
            stats.t_reached = t;
            return Err(Error::Stiffness { t, h: step, stats });
        }
        let hs = dir * step;

        ks.clear();
        ks.push(k1.clone());
        for s in 1..6 {
            let xs = combo(&x, hs, &A[s][..s], &ks);
            ks.push(eval(&xs, t + C[s] * hs, &mut stats)?);
        }
        let x_new = combo(&x, hs, &A[6], &ks);
        let t_new = if last { t1 } else { t + hs };
        let k7 = eval(&x_new, t_new, &mut stats)?;
        ks.push(k7);

        let err_vec: Vec<f64> = (0..x.numel())
            .map(|j| hs * E.iter().zip(&ks).map(|(e, k)| e * k.data()[j]).sum::<f64>())
            .collect();
        let err = scaled_rms(&err_vec, x.data(), x_new.data(), rtol, atol);

        if err <= 1.0 {
            stats.accepted += 1;
            t = t_new;
            x = x_new;
            k1 = ks.pop().expect("seven stages");
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            err_prev = err.max(1e-4);
            h = step * factor;
            if last {
                break;
            }
        } else {
            stats.rejected += 1;
            let factor = (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h = step * factor;
        }
    }
    stats.t_reached = t1;
    Ok((x, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn exponential_growth() {
        let (x, stats) = solve_ode(|x, _| Ok(x.clone()), &scalar(1.0), &SolverSpec::dopri5(1e-5, 1e-5)).unwrap();
        assert!((x.data()[0] - std::f64::consts::E).abs() < 1e-5);
        assert!(stats.nfe >= 6 * stats.accepted);
        assert_eq!(stats.t_reached, 1.0);
    }

    #[test]
    fn zero_field_is_cheap_and_exact() {
        let x0 = Tensor::from_vec(vec![0.3, -2.0]);
        let (x, stats) = solve_ode(
            |x, _| Ok(Tensor::zeros(x.shape())),
            &x0,
            &SolverSpec::dopri5(1e-5, 1e-5),
        )
        .unwrap();
        assert_eq!(x, x0);
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.rejected, 0);
        assert_eq!(stats.nfe, 8);
    }

    #[test]
    fn constant_field_exact_without_rejections() {
        let x0 = Tensor::from_vec(vec![1.0, 2.0]);
        let c = Tensor::from_vec(vec![0.5, -3.0]);
        let (x, stats) = solve_ode(|_, _| Ok(c.clone()), &x0, &SolverSpec::dopri5(1e-5, 1e-5)).unwrap();
        assert!((x.data()[0] - 1.5).abs() < 1e-12);
        assert!((x.data()[1] + 1.0).abs() < 1e-12);
        assert_eq!(stats.rejected, 0);
    }

    #[test]
    fn euler_counts_and_reverse() {
        let (x, stats) = solve_ode(|_, _| Ok(scalar(2.0)), &scalar(0.0), &SolverSpec::euler(7)).unwrap();
        assert!((x.data()[0] - 2.0).abs() < 1e-12);
        assert_eq!(stats.nfe, 7);
        let (back, _) = solve_ode(|_, _| Ok(scalar(2.0)), &x, &SolverSpec::euler(7).reversed()).unwrap();
        assert!(back.data()[0].abs() < 1e-12);
    }

    #[test]
    fn reverse_exponential() {
        let spec = SolverSpec::dopri5(1e-8, 1e-8).reversed();
        let (x, _) = solve_ode(|x, _| Ok(x.clone()), &scalar(std::f64::consts::E), &spec).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn singular_field_reports_stiffness() {
        // dx/dt = 1/(0.5 − t)² blows up at t = 0.5.
        let res = solve_ode(
            |_, t| Ok(scalar(1.0 / ((0.5 - t) * (0.5 - t)))),
            &scalar(0.0),
            &SolverSpec::dopri5(1e-6, 1e-6),
        );
        match res {
            Err(Error::Stiffness { t, stats, .. }) => {
                assert!(t < 0.5 && t > 0.49, "{t}");
                assert!(stats.nfe > 0);
            }
            Err(Error::Numeric { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(SolverSpec::euler(0).validate().is_err());
        assert!(SolverSpec::dopri5(0.0, 1e-5).validate().is_err());
    }
}
