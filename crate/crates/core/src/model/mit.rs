//! Small diffusion transformer on image patches with adaptive normalisation,
//! projection dropout and long-range skip connections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::ForwardCtx;
use super::params::{Bound, Init, Linear, ParamId, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub patch: usize,
    #[serde(default = "default_proj_dropout")]
    pub proj_dropout: f64,
    #[serde(default = "yes")]
    pub use_rmsnorm: bool,
    #[serde(default = "yes")]
    pub use_long_skips: bool,
    /// Scale-only modulation (no shift).
    #[serde(default)]
    pub ada_rms: bool,
    /// Adds each block's input to the output of the following block.
    #[serde(default)]
    pub block_skip: bool,
    /// Per-sample stochastic depth on residual branches.
    #[serde(default)]
    pub drop_path: f64,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    /// Zero-initialise modulation and output layers.
    #[serde(default = "yes")]
    pub zero_init: bool,
}

fn default_proj_dropout() -> f64 {
    0.1
}

fn default_time_dim() -> usize {
    16
}

fn yes() -> bool {
    true
}

impl MitConfig {
    /// Depth 4, 2 heads, width 32, patch 2.
    pub fn toy(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            depth: 4,
            heads: 2,
            hidden: 32,
            patch: 2,
            proj_dropout: 0.1,
            use_rmsnorm: true,
            use_long_skips: true,
            ada_rms: false,
            block_skip: false,
            drop_path: 0.0,
            time_dim: 16,
            zero_init: true,
        }
    }

    /// Depth 28, 16 heads, width 1152, patch 2.
    pub fn xl2(channels: usize, height: usize, width: usize) -> Self {
        Self {
            depth: 28,
            heads: 16,
            hidden: 1152,
            time_dim: 256,
            ..Self::toy(channels, height, width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::Contract("transformer extents must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.hidden.is_multiple_of(4) {
            return Err(Error::Contract(format!(
                "hidden {} must be a multiple of 4",
                self.hidden
            )));
        }
        if self.use_long_skips && !self.depth.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "long skips need even depth, got {}",
                self.depth
            )));
        }
        for (what, p) in [("proj_dropout", self.proj_dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Domain {
                    what,
                    value: p,
                    domain: "[0, 1)",
                });
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(shape_err(
                "mit",
                format!(
                    "{}×{} image not divisible by patch {}",
                    self.height, self.width, self.patch
                ),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Flat sample width `C·H·W`.
    pub fn sample_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Parameter count (condition tables excluded) and dense multiply-accumulates
    /// per sample, from the layer shapes alone.
    pub fn analytic_counts(&self) -> (usize, u64) {
        let (h, pd, td, n) = (self.hidden, self.patch_dim(), self.time_dim, self.tokens() as u64);
        let lin = |i: usize, o: usize| i * o + o;
        let mut params = lin(pd, h) + lin(td, h) + lin(h, h);
        let mut macs = n * (pd * h) as u64 + (td * h + h * h) as u64;
        for i in 0..self.depth {
            params += 2 * h + 3 * lin(h, h) + h * h + lin(h, 4 * h) + lin(4 * h, h) + lin(h, 6 * h);
            macs += (h * 6 * h) as u64 + n * (4 * h * h + 8 * h * h) as u64;
            if self.skip_source(i).is_some() {
                params += lin(2 * h, h);
                macs += n * (2 * h * h) as u64;
            }
        }
        params += h + lin(h, 2 * h) + lin(h, pd);
        macs += (h * 2 * h) as u64 + n * (h * pd) as u64;
        (params, macs)
    }

    /// Multiply-accumulates per sample in the score and mixing products.
    pub fn attention_macs(&self) -> u64 {
        let (n, h) = (self.tokens() as u64, self.hidden as u64);
        self.depth as u64 * 2 * n * n * h
    }

    /// Index of the block whose output feeds block `i` through a long skip.
    pub fn skip_source(&self, i: usize) -> Option<usize> {
        (self.use_long_skips && i >= self.depth / 2).then(|| self.depth - 1 - i)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: ParamId,
    q: Linear,
    /// Keys carry no bias: it would shift every score of a query equally.
    k: ParamId,
    v: Linear,
    proj: Linear,
    norm2: ParamId,
    fc1: Linear,
    fc2: Linear,
    ada: Linear,
    merge: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Mit {
    pub cfg: MitConfig,
    patch_embed: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    final_norm: ParamId,
    final_ada: Linear,
    out: Linear,
    pos: Tensor,
}

impl Mit {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &MitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let z = cfg.zero_init;
        let patch_embed = Linear::new(params, "mit.patch", cfg.patch_dim(), h, false, rng);
        let time1 = Linear::new(params, "mit.time.0", cfg.time_dim, h, false, rng);
        let time2 = Linear::new(params, "mit.time.1", h, h, false, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = |s: &str| format!("mit.block{i}.{s}");
            let merge = cfg
                .skip_source(i)
                .map(|_| Linear::new(params, &name("merge"), 2 * h, h, false, rng));
            blocks.push(Block {
                norm1: params.add(name("norm1"), &[h], Init::Constant(1.0), rng),
                q: Linear::new(params, &name("q"), h, h, false, rng),
                k: params.add(name("k.w"), &[h, h], Init::Fan(h), rng),
                v: Linear::new(params, &name("v"), h, h, false, rng),
                proj: Linear::new(params, &name("proj"), h, h, false, rng),
                norm2: params.add(name("norm2"), &[h], Init::Constant(1.0), rng),
                fc1: Linear::new(params, &name("fc1"), h, 4 * h, false, rng),
                fc2: Linear::new(params, &name("fc2"), 4 * h, h, false, rng),
                ada: Linear::new(params, &name("ada"), h, 6 * h, z, rng),
                merge,
            });
        }
        let final_norm = params.add("mit.final.norm", &[h], Init::Constant(1.0), rng);
        let final_ada = Linear::new(params, "mit.final.ada", h, 2 * h, z, rng);
        let out = Linear::new(params, "mit.final.out", h, cfg.patch_dim(), z, rng);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            time1,
            time2,
            blocks,
            final_norm,
            final_ada,
            out,
            pos: sincos_2d(cfg.grid(), h),
        })
    }

    /// Conditioning width expected by [`Mit::forward`].
    pub fn cond_dim(&self) -> usize {
        self.cfg.hidden
    }

    /// `x`: `B × (C·H·W)` in channel-major layout. `temb`: `B × time_dim`
    /// sinusoidal features. `cond`: `B × hidden`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        temb: Var,
        cond: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let b = tape.shape(x)[0];
        if tape.value(x).numel() != b * cfg.sample_dim() {
            return Err(shape_err(
                "mit",
                format!(
                    "input {:?} does not hold {} values per sample",
                    tape.shape(x),
                    cfg.sample_dim()
                ),
            ));
        }
        let n = cfg.tokens();
        let h = cfg.hidden;

        let tokens = tape.gather(x, patchify_index(cfg, b), vec![b * n, cfg.patch_dim()])?;
        let mut z = self.patch_embed.forward(tape, p, tokens)?;
        let pos = tape.constant(tile_rows(&self.pos, b));
        z = tape.add(z, pos)?;

        let t1 = self.time1.forward(tape, p, temb)?;
        let t1 = tape.silu(t1)?;
        let t2 = self.time2.forward(tape, p, t1)?;
        let c = tape.add(cond, t2)?;
        let c = tape.silu(c)?;
        let per_token: Vec<usize> = (0..b).flat_map(|s| std::iter::repeat_n(s, n)).collect();

        let mut outputs: Vec<Var> = Vec::with_capacity(cfg.depth);
        let mut prev_input: Option<Var> = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            if let (Some(src), Some(merge)) = (cfg.skip_source(i), &blk.merge) {
                let cat = tape.concat_last(&[z, outputs[src]])?;
                z = merge.forward(tape, p, cat)?;
            }
            let input = z;
            let m = blk.ada.forward(tape, p, c)?;
            let m = tape.gather_rows(m, &per_token)?;
            let chunk = |tape: &mut Tape, k: usize| tape.slice_last(m, k * h, h);
            let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
            let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

            let a = self.norm(tape, z, p[blk.norm1])?;
            let a = self.modulate(tape, a, shift1, scale1)?;
            let a = self.attention(tape, p, blk, a, b)?;
            let a = tape.dropout(a, cfg.proj_dropout, ctx.train, ctx.seed, ctx.next_counter())?;
            let a = tape.mul(a, gate1)?;
            let a = self.drop_path(tape, a, b, ctx)?;
            z = tape.add(z, a)?;

            let f = self.norm(tape, z, p[blk.norm2])?;
            let f = self.modulate(tape, f, shift2, scale2)?;
            let f = blk.fc1.forward(tape, p, f)?;
            let f = tape.gelu(f)?;
            let f = blk.fc2.forward(tape, p, f)?;
            let f = tape.mul(f, gate2)?;
            let f = self.drop_path(tape, f, b, ctx)?;
            z = tape.add(z, f)?;

            if cfg.block_skip {
                if let Some(prev) = prev_input {
                    z = tape.add(z, prev)?;
                }
            }
            prev_input = Some(input);
            outputs.push(z);
        }

        let m = self.final_ada.forward(tape, p, c)?;
        let m = tape.gather_rows(m, &per_token)?;
        let shift = tape.slice_last(m, 0, h)?;
        let scale = tape.slice_last(m, h, h)?;
        let y = self.norm(tape, z, p[self.final_norm])?;
        let y = self.modulate(tape, y, shift, scale)?;
        let y = self.out.forward(tape, p, y)?;
        tape.gather(y, unpatchify_index(cfg, b), vec![b, cfg.sample_dim()])
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: Var) -> Result<Var> {
        if self.cfg.use_rmsnorm {
            tape.rmsnorm(x, gain)
        } else {
            tape.layernorm(x, gain)
        }
    }

    /// `x·(1 + scale) + shift`, shift omitted for scale-only modulation.
    fn modulate(&self, tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let xs = tape.mul(x, scale)?;
        let y = tape.add(x, xs)?;
        if self.cfg.ada_rms {
            Ok(y)
        } else {
            tape.add(y, shift)
        }
    }

    fn drop_path(&self, tape: &mut Tape, x: Var, batch: usize, ctx: &mut ForwardCtx) -> Result<Var> {
        let p = self.cfg.drop_path;
        if !ctx.train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = stream(ctx.seed, ctx.next_counter());
        let per_sample = tape.value(x).numel() / batch;
        let mut mask = Vec::with_capacity(batch * per_sample);
        for _ in 0..batch {
            let keep = if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) };
            mask.extend(std::iter::repeat_n(keep, per_sample));
        }
        tape.mask_mul(x, mask)
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, blk: &Block, x: Var, batch: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let (n, h) = (cfg.tokens(), cfg.hidden);
        let dh = h / cfg.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let q_all = blk.q.forward(tape, p, x)?;
        let k_all = tape.matmul(x, p[blk.k])?;
        let v_all = blk.v.forward(tape, p, x)?;
        let mut per_sample = Vec::with_capacity(batch);
        for s in 0..batch {
            let rows: Vec<usize> = (s * n..(s + 1) * n).collect();
            let (lq, lk, lv) = (
                tape.gather_rows(q_all, &rows)?,
                tape.gather_rows(k_all, &rows)?,
                tape.gather_rows(v_all, &rows)?,
            );
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let q = tape.slice_last(lq, hd * dh, dh)?;
                let k = tape.slice_last(lk, hd * dh, dh)?;
                let v = tape.slice_last(lv, hd * dh, dh)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv)?;
                let weights = tape.softmax(scores)?;
                heads.push(tape.matmul(weights, v)?);
            }
            per_sample.push(tape.concat_last(&heads)?);
        }
        let mixed = tape.concat_rows(&per_sample)?;
        blk.proj.forward(tape, p, mixed)
    }

    /// Dense multiply-accumulates per sample, excluding the two
    /// activation-by-activation attention products.
    pub fn dense_macs(&self) -> u64 {
        let n = self.cfg.tokens() as u64;
        let mut total = n * self.patch_embed.macs() as u64;
        total += (self.time1.macs() + self.time2.macs()) as u64;
        for blk in &self.blocks {
            total += blk.ada.macs() as u64;
            total += n
                * (blk.q.macs()
                    + self.cfg.hidden * self.cfg.hidden
                    + blk.v.macs()
                    + blk.proj.macs()
                    + blk.fc1.macs()
                    + blk.fc2.macs()) as u64;
            if let Some(m) = &blk.merge {
                total += n * m.macs() as u64;
            }
        }
        total + self.final_ada.macs() as u64 + n * self.out.macs() as u64
    }

    /// Attention score and mixing multiply-accumulates per sample.
    pub fn attention_macs(&self) -> u64 {
        self.cfg.attention_macs()
    }
}

/// Flat indices taking `B × (C·H·W)` images to `(B·N) × (C·p·p)` patch rows.
pub fn patchify_index(cfg: &MitConfig, batch: usize) -> Vec<usize> {
    let (c, hh, ww, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let (gh, gw) = cfg.grid();
    let mut idx = Vec::with_capacity(batch * c * hh * ww);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(b * c * hh * ww + ch * hh * ww + (gy * p + py) * ww + gx * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
pub fn unpatchify_index(cfg: &MitConfig, batch: usize) -> Vec<usize> {
    let (c, hh, ww, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let (_, gw) = cfg.grid();
    let n = cfg.tokens();
    let pd = cfg.patch_dim();
    let mut idx = Vec::with_capacity(batch * c * hh * ww);
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..ww {
                    let tok = b * n + (y / p) * gw + x / p;
                    idx.push(tok * pd + ch * p * p + (y % p) * p + x % p);
                }
            }
        }
    }
    idx
}

/// Fixed 2-D sine/cosine position table, `N × width`.
fn sincos_2d((gh, gw): (usize, usize), width: usize) -> Tensor {
    let quarter = width / 4;
    let freq = |k: usize| 1.0 / 10_000f64.powf(k as f64 / quarter as f64);
    let mut data = Vec::with_capacity(gh * gw * width);
    for y in 0..gh {
        for x in 0..gw {
            for pos in [y as f64, x as f64] {
                data.extend((0..quarter).map(|k| (pos * freq(k)).sin()));
                data.extend((0..quarter).map(|k| (pos * freq(k)).cos()));
            }
        }
    }
    Tensor::new(vec![gh * gw, width], data).expect("grid extents positive")
}

fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let parts: Vec<&Tensor> = std::iter::repeat_n(t, times).collect();
    Tensor::concat_rows(&parts).expect("same width")
}
