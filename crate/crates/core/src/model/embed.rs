use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamId, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Probability with which each label slot is replaced by its null token during training.
pub const COND_DROPOUT: f64 = 0.15;

/// Conditioning for one sample. `None` in a slot is the null token.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CondLabels {
    pub perturbation: Option<usize>,
    pub context: Option<usize>,
    /// Perturbation embedding supplied directly in conditioning space,
    /// used in place of the learned table (adaptor path).
    pub embedding: Option<Vec<f64>>,
}

impl CondLabels {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn new(perturbation: usize, context: usize) -> Self {
        Self {
            perturbation: Some(perturbation),
            context: Some(context),
            embedding: None,
        }
    }

    pub fn with_embedding(embedding: Vec<f64>, context: Option<usize>) -> Self {
        Self {
            perturbation: None,
            context,
            embedding: Some(embedding),
        }
    }
}

/// Per-forward randomness and mode. Random draws are pure functions of
/// `(seed, counter)`, and the counter advances once per draw site.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    pub cond_dropout: f64,
    counter: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            cond_dropout: 0.0,
            counter: 0,
        }
    }

    pub fn train(seed: u64, cond_dropout: f64) -> Self {
        Self {
            train: true,
            seed,
            cond_dropout,
            counter: 0,
        }
    }

    pub fn next_counter(&mut self) -> u64 {
        self.counter += 1;
        self.counter
    }
}

/// Sinusoidal features of `t` at log-spaced frequencies from 1 to 200.
pub fn time_features(times: &[f64], width: usize) -> Result<Tensor> {
    if width < 2 || !width.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "time feature width {width} must be even and ≥ 2"
        )));
    }
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            let frac = if half == 1 { 0.0 } else { k as f64 / (half - 1) as f64 };
            (frac * 200f64.ln()).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * width);
    for &t in times {
        data.extend(freqs.iter().map(|f| (f * t).sin()));
        data.extend(freqs.iter().map(|f| (f * t).cos()));
    }
    Tensor::new(vec![times.len(), width], data)
}

/// Learned per-slot embeddings. Row `P` of the perturbation table and row
/// `E` of the context table are the null tokens.
#[derive(Clone, Debug)]
pub struct ConditionEmbedder {
    pub pert_table: ParamId,
    pub ctx_table: ParamId,
    pub n_pert: usize,
    pub n_ctx: usize,
    pub dim: usize,
}

impl ConditionEmbedder {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, n_pert: usize, n_ctx: usize, dim: usize, rng: &mut R) -> Self {
        let pert_table = params.add("cond.pert", &[n_pert + 1, dim], Init::Normal(1.0), rng);
        let ctx_table = params.add("cond.ctx", &[n_ctx + 1, dim], Init::Normal(1.0), rng);
        Self {
            pert_table,
            ctx_table,
            n_pert,
            n_ctx,
            dim,
        }
    }

    pub fn check(&self, labels: &[CondLabels]) -> Result<()> {
        for l in labels {
            if l.perturbation.is_some() && l.embedding.is_some() {
                return Err(Error::Contract(
                    "labels set both a perturbation id and an embedding".into(),
                ));
            }
            if let Some(p) = l.perturbation.filter(|&p| p >= self.n_pert) {
                return Err(Error::Contract(format!(
                    "perturbation {p} out of range 0..{}",
                    self.n_pert
                )));
            }
            if let Some(c) = l.context.filter(|&c| c >= self.n_ctx) {
                return Err(Error::Contract(format!("context {c} out of range 0..{}", self.n_ctx)));
            }
            if let Some(e) = l.embedding.as_ref().filter(|e| e.len() != self.dim) {
                return Err(Error::Contract(format!(
                    "embedding has width {}, conditioning width is {}",
                    e.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    /// Which slots survive condition dropout, as `(perturbation, context)` per sample.
    pub fn keep_mask(&self, n: usize, ctx: &mut ForwardCtx) -> Vec<(bool, bool)> {
        if !ctx.train || ctx.cond_dropout == 0.0 {
            return vec![(true, true); n];
        }
        let mut rng = stream(ctx.seed, ctx.next_counter());
        (0..n)
            .map(|_| {
                let p = rng.random::<f64>() >= ctx.cond_dropout;
                let c = rng.random::<f64>() >= ctx.cond_dropout;
                (p, c)
            })
            .collect()
    }

    /// Conditioning vectors `B × dim`. When `external` is given, its row `i`
    /// supplies the perturbation embedding of every sample whose labels carry
    /// an embedding; otherwise those rows come from the labels themselves.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        labels: &[CondLabels],
        external: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check(labels)?;
        let n = labels.len();
        let keep = self.keep_mask(n, ctx);
        let any_ext = labels.iter().any(|l| l.embedding.is_some());

        let pert_source = if any_ext {
            let ext = match external {
                Some(v) => {
                    if tape.shape(v) != [n, self.dim] {
                        return Err(Error::Contract(format!(
                            "external embeddings have shape {:?}, need [{n}, {}]",
                            tape.shape(v),
                            self.dim
                        )));
                    }
                    v
                }
                None => {
                    let mut data = Vec::with_capacity(n * self.dim);
                    for l in labels {
                        match &l.embedding {
                            Some(e) => data.extend_from_slice(e),
                            None => data.extend(std::iter::repeat_n(0.0, self.dim)),
                        }
                    }
                    tape.constant(Tensor::new(vec![n, self.dim], data)?)
                }
            };
            tape.concat_rows(&[p[self.pert_table], ext])?
        } else {
            p[self.pert_table]
        };

        let null_p = self.n_pert;
        let pert_rows: Vec<usize> = labels
            .iter()
            .zip(&keep)
            .enumerate()
            .map(|(i, (l, &(kp, _)))| match (kp, l.perturbation, &l.embedding) {
                (true, Some(id), _) => id,
                (true, None, Some(_)) => self.n_pert + 1 + i,
                _ => null_p,
            })
            .collect();
        let ctx_rows: Vec<usize> = labels
            .iter()
            .zip(&keep)
            .map(|(l, &(_, kc))| match (kc, l.context) {
                (true, Some(c)) => c,
                _ => self.n_ctx,
            })
            .collect();
        let pe = tape.gather_rows(pert_source, &pert_rows)?;
        let ce = tape.gather_rows(p[self.ctx_table], &ctx_rows)?;
        tape.add(pe, ce)
    }

    /// Numeric value of the learned embedding of perturbation `id`.
    pub fn pert_row(&self, params: &ParamSet, id: usize) -> Vec<f64> {
        params.get(self.pert_table).row(id).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn setup() -> (ParamSet, ConditionEmbedder) {
        let mut ps = ParamSet::new();
        let e = ConditionEmbedder::new(&mut ps, 3, 2, 4, &mut seeded(0));
        (ps, e)
    }

    fn embed(ps: &ParamSet, e: &ConditionEmbedder, labels: &[CondLabels], ctx: &mut ForwardCtx) -> Tensor {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let v = e.embed(&mut tape, &p, labels, None, ctx).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn null_labels_use_null_rows() {
        let (ps, e) = setup();
        let out = embed(&ps, &e, &[CondLabels::null()], &mut ForwardCtx::eval());
        let want: Vec<f64> = ps
            .get(e.pert_table)
            .row(3)
            .iter()
            .zip(ps.get(e.ctx_table).row(2))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let (ps, e) = setup();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let bad = CondLabels::new(3, 0);
        assert!(matches!(
            e.embed(&mut tape, &p, &[bad], None, &mut ForwardCtx::eval()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn external_embedding_replaces_table_row() {
        let (ps, e) = setup();
        let emb = vec![1.0, 2.0, 3.0, 4.0];
        let out = embed(
            &ps,
            &e,
            &[CondLabels::with_embedding(emb.clone(), Some(1))],
            &mut ForwardCtx::eval(),
        );
        let ctx = ps.get(e.ctx_table).row(1);
        for j in 0..4 {
            assert_eq!(out.data()[j], emb[j] + ctx[j]);
        }
    }

    #[test]
    fn fully_dropped_equals_null() {
        let (ps, e) = setup();
        let labels: Vec<CondLabels> = (0..200).map(|i| CondLabels::new(i % 3, i % 2)).collect();
        let mut ctx = ForwardCtx::train(11, COND_DROPOUT);
        let keep = e.keep_mask(labels.len(), &mut ctx.clone());
        let out = embed(&ps, &e, &labels, &mut ctx);
        let null = embed(&ps, &e, &[CondLabels::null()], &mut ForwardCtx::eval());
        let mut seen = 0;
        for (i, k) in keep.iter().enumerate() {
            if *k == (false, false) {
                assert_eq!(out.row(i), null.data());
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn time_features_shape() {
        let f = time_features(&[0.0, 0.5], 8).unwrap();
        assert_eq!(f.shape(), &[2, 8]);
        assert_eq!(f.row(0)[..4], [0.0; 4]);
        assert_eq!(f.row(0)[4..], [1.0; 4]);
        assert!(time_features(&[0.0], 3).is_err());
    }
}
