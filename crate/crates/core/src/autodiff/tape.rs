//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Node inputs always precede the node, so a single
//! reverse sweep over the node list is a valid topological order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{shape_err, Error, Result};

pub const RMSNORM_EPS: f64 = 1e-6;
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a right-hand operand is combined with the left-hand one.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// `b` is a single row broadcast over every row of `a`.
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        inv_std: Vec<f64>,
    },
    MaskMul(Var, Vec<f64>),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// `out[i] = x[index[i]]` over flat storage.
    Gather(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Multiply-accumulate counts observed while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Products whose right operand is a leaf (weights and fixed tables).
    pub dense: u64,
    /// Products between two computed activations (attention scores and mixing).
    pub activation: u64,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` was unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    macs: MacCount,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.macs = MacCount::default();
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let rg = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push_raw(value, op, rg))
    }

    fn bcast(&self, name: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let nb: usize = sb.iter().product();
        let row_shaped = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if row_shaped && !sa.is_empty() && nb == *sa.last().unwrap() {
            return Ok(Bcast::Row);
        }
        Err(shape_err(name, format!("{sa:?} with {sb:?}")))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let d = bv.numel();
        let data: Vec<f64> = match kind {
            Bcast::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % d]))
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op(a, b, kind), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; `b` may be a row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let macs = (m * k * n) as u64;
        if self.is_leaf(b) {
            self.macs.dense += macs;
        } else {
            self.macs.activation += macs;
        }
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// `x / sqrt(mean(x²) + ε) · gain` over the last axis, per-channel gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let gv = self.value(gain);
        if gv.numel() != d {
            return Err(shape_err("rmsnorm", format!("gain {:?} for width {d}", gv.shape())));
        }
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMSNORM_EPS).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * r * g));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("rmsnorm", value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Mean-centred normalisation with per-channel gain and no bias.
    pub fn layernorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let gv = self.value(gain);
        if gv.numel() != d {
            return Err(shape_err("layernorm", format!("gain {:?} for width {d}", gv.shape())));
        }
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(r);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| (v - m) * r * g));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layernorm", value, Op::LayerNorm { x, gain, inv_std }, &[x, gain])
    }

    /// Inverted dropout. The keep mask is a pure function of `(seed, counter)`.
    /// With `train == false` or `p == 0` this returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64, counter: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain {
                what: "dropout p",
                value: p,
                domain: "[0, 1)",
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).numel(), p, seed, counter);
        self.mask_mul(x, mask)
    }

    /// Multiplies by a fixed mask (no gradient flows into the mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("mask_mul", "mask length"));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::MaskMul(x, mask), &[x])
    }

    /// Concatenates along the last axis; all parts share leading extents.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_last", "no parts"))?;
        let rows = self.value(first).rows();
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_last", "row counts differ"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push("concat_last", value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal last extent along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&vals)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    /// Covers reshapes, slices, patch extraction and row lookups.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of {n}")));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather(x, index), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        self.gather(x, (0..n).collect(), shape)
    }

    /// Picks rows of a `rows × d` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.last_dim();
        let n = tv.rows();
        let mut index = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(shape_err("gather_rows", format!("row {r} out of {n}")));
            }
            index.extend(r * d..(r + 1) * d);
        }
        self.gather(table, index, vec![rows.len(), d])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d || len == 0 {
            return Err(shape_err("slice_last", format!("{start}+{len} > {d}")));
        }
        let rows = xv.rows();
        let mut index = Vec::with_capacity(rows * len);
        for r in 0..rows {
            index.extend(r * d + start..r * d + start + len);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.gather(x, index, shape)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum_all", value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean_all", value, Op::MeanAll(x), &[x])
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / av.numel() as f64);
        self.push("mse", value, Op::Mse(a, b), &[a, b])
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse accumulation from a scalar loss. A second call without
    /// [`Tape::reset`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Gradients of intermediate nodes are kept; non-differentiable leaves are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, k) => {
                self.acc(grads, *a, g.clone());
                self.acc_bcast(grads, *b, g.clone(), *k);
            }
            Op::Sub(a, b, k) => {
                self.acc(grads, *a, g.clone());
                self.acc_bcast(grads, *b, g.scale(-1.0), *k);
            }
            Op::Mul(a, b, k) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = bv.numel();
                if self.requires(*a) {
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bv.data()[if *k == Bcast::Row { j % d } else { j }])
                        .collect();
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                if self.requires(*b) {
                    let gb = g.zip_with(av, |x, y| x * y)?;
                    self.acc_bcast(grads, *b, gb, *k);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.requires(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                    self.acc(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?),
            Op::Gelu(a) => {
                let ga = g.zip_with(self.value(*a), |gv, x| gv * gelu_grad(x))?;
                self.acc(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_with(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.acc(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut ga = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), ga)?);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.last_dim();
                let mut gx = Vec::with_capacity(xv.numel());
                let mut gg = vec![0.0; d];
                for ((xr, gr), &r) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(inv_rms) {
                    let s: f64 = (0..d).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                    let c = r * r * r * s / d as f64;
                    for j in 0..d {
                        gx.push(r * gr[j] * gv.data()[j] - c * xr[j]);
                        gg[j] += gr[j] * xr[j] * r;
                    }
                }
                if self.requires(*x) {
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if self.requires(*gain) {
                    self.acc(grads, *gain, Tensor::new(gv.shape().to_vec(), gg)?);
                }
            }
            Op::LayerNorm { x, gain, inv_std } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.last_dim();
                let dn = d as f64;
                let mut gx = Vec::with_capacity(xv.numel());
                let mut gg = vec![0.0; d];
                for ((xr, gr), &r) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(inv_std) {
                    let m = xr.iter().sum::<f64>() / dn;
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - m) * r).collect();
                    let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gv.data()[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / dn;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / dn;
                    for j in 0..d {
                        gx.push(r * (dxhat[j] - mean_d - xhat[j] * mean_dx));
                        gg[j] += gr[j] * xhat[j];
                    }
                }
                if self.requires(*x) {
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if self.requires(*gain) {
                    self.acc(grads, *gain, Tensor::new(gv.shape().to_vec(), gg)?);
                }
            }
            Op::MaskMul(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::ConcatLast(parts) => {
                let rows = g.rows();
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.last_dim();
                    if self.requires(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), gp)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    if self.requires(p) {
                        let gp = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), gp)?);
                    }
                    offset += n;
                }
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut ga = vec![0.0; av.numel()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    ga[src] += gv;
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.data()[0] / n;
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.data()[0] / av.numel() as f64;
                let diff = av.zip_with(bv, |x, y| c * (x - y))?;
                if self.requires(*b) {
                    self.acc(grads, *b, diff.scale(-1.0));
                }
                self.acc(grads, *a, diff);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_bcast(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor, kind: Bcast) {
        if !self.requires(v) {
            return;
        }
        match kind {
            Bcast::Same => self.acc(grads, v, g),
            Bcast::Row => {
                let shape = self.shape(v).to_vec();
                let d = shape.iter().product::<usize>();
                let mut red = vec![0.0; d];
                for (j, x) in g.data().iter().enumerate() {
                    red[j % d] += x;
                }
                self.acc(grads, v, Tensor::new(shape, red).expect("row shape"));
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Keep mask scaled by `1/(1-p)`, drawn from the `(seed, counter)` stream.
pub fn dropout_mask(n: usize, p: f64, seed: u64, counter: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y), tape.value(a));

        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[17.0, 39.0]);

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let y = tape.matmul(z, a).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn primitive_fixed_points() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let g = tape.gelu(z).unwrap();
        assert_eq!(tape.value(g).item().unwrap(), 0.0);

        for c in [0.1, 1.0, 37.5] {
            let x = tape.constant(Tensor::full(&[3], c));
            let gain = tape.constant(Tensor::full(&[3], 1.0));
            let y = tape.rmsnorm(x, gain).unwrap();
            let want = c / (c * c + RMSNORM_EPS).sqrt();
            for &v in tape.value(y).data() {
                assert!((v - want).abs() < 1e-15, "rmsnorm({c}) gave {v}");
                assert!((v - 1.0).abs() < 1e-4);
            }
        }

        let x = tape.constant(Tensor::full(&[1, 3], 2.5));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient_is_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn mse_of_self_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
        let l = tape.mse(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_backward_needs_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
        tape.reset();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 3.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(!g.is_reached(unused));
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e200));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::Numeric { op: "mul" })));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.3, false, 7, 0).unwrap();
        assert_eq!(y, x);
        let y = tape.dropout(x, 0.3, true, 7, 0).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
        assert!(tape.dropout(x, 1.0, true, 7, 0).is_err());
    }

    #[test]
    fn dropout_masks_depend_only_on_seed_and_counter() {
        assert_eq!(dropout_mask(64, 0.5, 3, 9), dropout_mask(64, 0.5, 3, 9));
        assert_ne!(dropout_mask(64, 0.5, 3, 9), dropout_mask(64, 0.5, 3, 10));
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, b).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn mac_counter_separates_weights_from_activations() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let w = tape.leaf(Tensor::zeros(&[3, 5]));
        let h = tape.matmul(x, w).unwrap();
        let ht = tape.transpose(h).unwrap();
        tape.matmul(h, ht).unwrap();
        assert_eq!(tape.macs().dense, 60);
        assert_eq!(tape.macs().activation, 4 * 5 * 4);
    }
}
