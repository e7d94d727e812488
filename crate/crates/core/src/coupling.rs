//! Source/target pairings for a training minibatch.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Largest batch accepted by [`pair_ot`].
pub const MAX_OT_BATCH: usize = 4096;

/// Which distribution the flow starts from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConstruction {
    /// Gaussian noise to all data, controls included as one more class.
    NoiseToData,
    /// Controls from the same context to perturbed samples.
    ControlToPerturbed { noise_aug_prob: f64 },
}

impl FlowConstruction {
    pub fn validate(&self) -> Result<()> {
        if let Self::ControlToPerturbed { noise_aug_prob } = *self {
            if !(0.0..=1.0).contains(&noise_aug_prob) {
                return Err(Error::Domain {
                    what: "noise_aug_prob",
                    value: noise_aug_prob,
                    domain: "[0, 1]",
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    #[default]
    Independent,
    MinibatchOt,
}

/// Assignment of source rows to target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    /// `permutation[i] = j` pairs source row `i` with target row `j`.
    pub permutation: Vec<usize>,
    /// Total squared Euclidean cost of the pairing.
    pub cost: f64,
}

impl CouplingPlan {
    /// Reorders source rows so row `j` of the result is paired with target row `j`.
    pub fn align_source(&self, x0: &Tensor) -> Result<Tensor> {
        let mut inverse = vec![0; self.permutation.len()];
        for (i, &j) in self.permutation.iter().enumerate() {
            inverse[j] = i;
        }
        let mut out = x0.select_rows(&inverse)?;
        if x0.rank() != 2 {
            out = out.reshape(x0.shape())?;
        }
        Ok(out)
    }
}

/// Gaussian sources for a batch of targets, paired by position.
pub fn pair_independent<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> (Tensor, Tensor) {
    let data = (0..x1.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let x0 = Tensor::new(x1.shape().to_vec(), data).expect("same shape");
    (x0, x1.clone())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minibatch OT restricted to rows sharing a key: each group is paired
/// among itself, so every condition keeps a Gaussian source. Returns the
/// source rows reordered to line up with `x1`.
pub fn pair_ot_within<K: Ord>(x0: &Tensor, x1: &Tensor, keys: &[K]) -> Result<Tensor> {
    let n = x0.rows();
    if keys.len() != n || x1.rows() != n || x0.shape() != x1.shape() {
        return Err(Error::Contract(format!(
            "pair_ot_within needs equal batches and one key per row, got {:?}, {:?} and {} keys",
            x0.shape(),
            x1.shape(),
            keys.len()
        )));
    }
    let mut groups: std::collections::BTreeMap<&K, Vec<usize>> = Default::default();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut out = x0.clone();
    let d = x0.numel() / n.max(1);
    for idx in groups.values() {
        let plan = pair_ot(&x0.select_rows(idx)?, &x1.select_rows(idx)?)?;
        let aligned = plan.align_source(&x0.select_rows(idx)?)?;
        for (k, &row) in idx.iter().enumerate() {
            out.data_mut()[row * d..(row + 1) * d].copy_from_slice(aligned.row(k));
        }
    }
    Ok(out)
}

/// Exact minimum-cost assignment under squared Euclidean cost.
pub fn pair_ot(x0: &Tensor, x1: &Tensor) -> Result<CouplingPlan> {
    let n = x0.shape().first().copied().unwrap_or(1);
    let m = x1.shape().first().copied().unwrap_or(1);
    if n != m || x0.numel() != x1.numel() {
        return Err(Error::Contract(format!(
            "pair_ot needs equal batches, got {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if n > MAX_OT_BATCH {
        return Err(Error::Contract(format!("batch {n} exceeds {MAX_OT_BATCH}")));
    }
    let d = x0.numel() / n;
    let row = |t: &Tensor, i: usize| -> Vec<f64> { t.data()[i * d..(i + 1) * d].to_vec() };
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let a = row(x0, i);
        for j in 0..n {
            cost[i * n + j] = sq_dist(&a, &x1.data()[j * d..(j + 1) * d]);
        }
    }
    let permutation = hungarian(&cost, n);
    let total = permutation.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(CouplingPlan {
        permutation,
        cost: total,
    })
}

/// Shortest-augmenting-path Hungarian algorithm with row/column potentials,
/// `O(n³)`. Returns `assign[row] = column`. Among equal reduced costs the
/// lowest column index wins, so results are deterministic.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) matched to column j; way[j]: previous column on the path.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Control samples available in each context.
#[derive(Clone, Debug, Default)]
pub struct ControlPool {
    by_context: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ControlPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, context: usize, sample: Vec<f64>) {
        self.by_context.entry(context).or_default().push(sample);
    }

    pub fn get(&self, context: usize) -> Option<&[Vec<f64>]> {
        self.by_context.get(&context).map(|v| v.as_slice())
    }

    pub fn contexts(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_context.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_context.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs each target with a control drawn uniformly (with replacement) from
/// its own context. With probability `noise_aug_prob` the control gets
/// standard-normal noise added.
pub fn pair_control<R: Rng + ?Sized>(
    x1: &Tensor,
    context_ids: &[usize],
    pool: &ControlPool,
    rng: &mut R,
    noise_aug_prob: f64,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&noise_aug_prob) {
        return Err(Error::Domain {
            what: "noise_aug_prob",
            value: noise_aug_prob,
            domain: "[0, 1]",
        });
    }
    let n = x1.shape().first().copied().unwrap_or(1);
    if context_ids.len() != n {
        return Err(shape_err(
            "pair_control",
            format!("{} context ids for {n} samples", context_ids.len()),
        ));
    }
    let d = x1.numel() / n;
    let mut data = Vec::with_capacity(x1.numel());
    for &ctx in context_ids {
        let controls = pool
            .get(ctx)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Data(format!("no controls for context {ctx}")))?;
        let pick = &controls[rng.random_range(0..controls.len())];
        if pick.len() != d {
            return Err(shape_err("pair_control", "control width differs from sample width"));
        }
        let augment = noise_aug_prob > 0.0 && rng.random::<f64>() < noise_aug_prob;
        if augment {
            data.extend(pick.iter().map(|&v| v + rng.sample::<f64, _>(StandardNormal)));
        } else {
            data.extend_from_slice(pick);
        }
    }
    Ok((Tensor::new(x1.shape().to_vec(), data)?, x1.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn single_pair_is_identity() {
        let x0 = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let x1 = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let plan = pair_ot(&x0, &x1).unwrap();
        assert_eq!(plan.permutation, vec![0]);
        assert_eq!(plan.cost, 9.0 + 4.0);
    }

    #[test]
    fn crossed_pairs_are_swapped() {
        let x0 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let x1 = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let plan = pair_ot(&x0, &x1).unwrap();
        assert_eq!(plan.permutation, vec![1, 0]);
        assert_eq!(plan.cost, 0.0);
        let aligned = plan.align_source(&x0).unwrap();
        assert_eq!(aligned, x1);
    }

    #[test]
    fn unequal_batches_rejected() {
        let x0 = Tensor::zeros(&[2, 2]);
        let x1 = Tensor::zeros(&[3, 2]);
        assert!(matches!(pair_ot(&x0, &x1), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_prefer_low_indices() {
        let x = Tensor::zeros(&[4, 3]);
        let plan = pair_ot(&x, &x).unwrap();
        assert_eq!(plan.permutation, vec![0, 1, 2, 3]);
    }

    #[test]
    fn independent_pairing_moments_and_determinism() {
        let x1 = Tensor::zeros(&[10_000, 1]);
        let (x0, same) = pair_independent(&x1, &mut seeded(3));
        assert_eq!(same, x1);
        let mean = x0.mean();
        let var = x0.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9_999.0;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
        let (again, _) = pair_independent(&x1, &mut seeded(3));
        assert_eq!(x0, again);

        let one = Tensor::full(&[1, 3], 2.0);
        let (x0, _) = pair_independent(&one, &mut seeded(9));
        assert_eq!(x0.shape(), &[1, 3]);
    }

    fn pool_with(contexts: &[(usize, Vec<Vec<f64>>)]) -> ControlPool {
        let mut pool = ControlPool::new();
        for (c, samples) in contexts {
            for s in samples {
                pool.insert(*c, s.clone());
            }
        }
        pool
    }

    #[test]
    fn control_pairing_is_context_stratified() {
        let pool = pool_with(&[
            (0, vec![vec![0.0, 0.0], vec![0.1, 0.1]]),
            (1, vec![vec![10.0, 10.0], vec![10.1, 10.1]]),
        ]);
        let ctx: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let x1 = Tensor::zeros(&[200, 2]);
        let (x0, _) = pair_control(&x1, &ctx, &pool, &mut seeded(1), 0.0).unwrap();
        for (i, &c) in ctx.iter().enumerate() {
            let row = x0.row(i);
            let from = pool.get(c).unwrap();
            assert!(from.iter().any(|s| s.as_slice() == row));
        }
    }

    #[test]
    fn single_control_pool_collapses_sources() {
        let pool = pool_with(&[(0, vec![vec![1.0, -1.0]])]);
        let x1 = Tensor::zeros(&[50, 2]);
        let (x0, _) = pair_control(&x1, &[0; 50], &pool, &mut seeded(2), 0.0).unwrap();
        assert!((0..50).all(|i| x0.row(i) == [1.0, -1.0]));

        let (x0, _) = pair_control(&x1, &[0; 50], &pool, &mut seeded(2), 0.5).unwrap();
        let untouched = (0..50).filter(|&i| x0.row(i) == [1.0, -1.0]).count();
        assert!(untouched > 10 && untouched < 40, "{untouched}");
    }

    #[test]
    fn missing_context_is_data_error() {
        let pool = pool_with(&[(0, vec![vec![0.0]])]);
        let x1 = Tensor::zeros(&[2, 1]);
        let err = pair_control(&x1, &[0, 7], &pool, &mut seeded(0), 0.0).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains('7')),
            other => panic!("{other:?}"),
        }
    }
}
