use std::ops::Index;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly created weight is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Fan(fan) => {
                let sd = 1.0 / (fan.max(1) as f64).sqrt();
                (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            Init::Normal(sd) => (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        self.push(name, Tensor::new(shape.to_vec(), data).expect("positive extents"))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Like [`ParamSet::bind`] but `which` is represented by an existing node.
    pub fn bind_with(&self, tape: &mut Tape, trainable: bool, which: ParamId, var: Var) -> Result<Bound> {
        if tape.shape(var) != self.tensors[which.0].shape() {
            return Err(Error::Contract(format!(
                "replacement for {} has shape {:?}",
                self.names[which.0],
                tape.shape(var)
            )));
        }
        let mut bound = self.bind(tape, trainable);
        bound.vars[which.0] = var;
        Ok(bound)
    }

    /// Replaces the values of `other`'s tensors when names and shapes agree exactly.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Contract("parameter shapes differ".into()));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Tape nodes for every tensor of a [`ParamSet`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let init = if zero { Init::Zero } else { Init::Fan(fan_in) };
        let w = params.add(format!("{name}.w"), &[fan_in, fan_out], init, rng);
        let b = params.add(format!("{name}.b"), &[fan_out], Init::Zero, rng);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p[self.w], p[self.b])
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    /// Multiply-accumulates per input row.
    pub fn macs(&self) -> usize {
        self.fan_in * self.fan_out
    }
}
