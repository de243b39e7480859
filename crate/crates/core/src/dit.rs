//! A small diffusion transformer over latent video tokens.
//!
//! Latents `[c, f, h, w]` are cut into `(p_t, p_h, p_w)` patches, embedded,
//! run through `K` adaLN-modulated transformer blocks with optional 3D
//! rotary attention, and projected back to per-token noise predictions.
//! Losses are computed in token space, which is a permutation of the latent
//! and leaves mean squared errors unchanged.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RopeTable, Var};
use crate::nn::{Init, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// Patch extent over latent `(f, h, w)`.
    pub patch: [usize; 3],
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Sinusoidal feature count fed to the timestep MLP.
    pub freq_dim: usize,
    pub num_classes: usize,
    pub rope: bool,
    pub rope_base: f64,
    /// Probability of replacing the class with the null class in training.
    pub cond_dropout: f64,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            patch: [1, 2, 2],
            width: 128,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            freq_dim: 64,
            num_classes: crate::world::SceneClass::COUNT,
            rope: true,
            rope_base: 10_000.0,
            cond_dropout: 0.1,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.depth < 2 {
            return bad("backbone needs at least 2 blocks");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.patch.contains(&0) || self.latent_channels == 0 {
            return bad("patch sizes and channels must be positive");
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return bad("freq_dim must be even");
        }
        if self.rope && (self.head_dim() % 2 != 0 || self.head_dim() < 6) {
            return bad("rope needs an even head dim of at least 6");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Token counts along latent `(f, h, w)` after patching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens per frame.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

pub fn token_grid(latent_shape: &[usize], patch: [usize; 3]) -> Result<TokenGrid> {
    if latent_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "latent must be [c, f, h, w], got {:?}",
            latent_shape
        )));
    }
    for (axis, (&size, &p)) in ["frame", "height", "width"]
        .into_iter()
        .zip(latent_shape[1..].iter().zip(&patch))
    {
        if size == 0 || size % p != 0 {
            return Err(Error::Indivisible {
                axis,
                size,
                factor: p,
            });
        }
    }
    Ok(TokenGrid {
        frames: latent_shape[1] / patch[0],
        height: latent_shape[2] / patch[1],
        width: latent_shape[3] / patch[2],
    })
}

/// `[c, f, h, w]` to `[tokens, c·p_t·p_h·p_w]`, tokens ordered frame-major.
pub fn patchify(latent: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let s = latent.shape();
    let grid = token_grid(s, patch)?;
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    let [pt, ph, pw] = patch;
    let pd = c * pt * ph * pw;
    let src = latent.data();
    let mut out = alloc::vec![0.0; grid.len() * pd];
    for tf in 0..grid.frames {
        for th in 0..grid.height {
            for tw in 0..grid.width {
                let tok = (tf * grid.height + th) * grid.width + tw;
                let row = &mut out[tok * pd..(tok + 1) * pd];
                let mut k = 0;
                for ch in 0..c {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let (fi, yi, xi) = (tf * pt + dt, th * ph + dy, tw * pw + dx);
                                row[k] = src[((ch * f + fi) * h + yi) * w + xi];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[grid.len(), pd], out))
}

pub fn unpatchify(tokens: &Tensor, channels: usize, grid: TokenGrid, patch: [usize; 3]) -> Tensor {
    let [pt, ph, pw] = patch;
    let pd = channels * pt * ph * pw;
    assert_eq!(
        tokens.shape(),
        &[grid.len(), pd],
        "unpatchify shape mismatch"
    );
    let (f, h, w) = (grid.frames * pt, grid.height * ph, grid.width * pw);
    let src = tokens.data();
    let mut out = alloc::vec![0.0; channels * f * h * w];
    for tf in 0..grid.frames {
        for th in 0..grid.height {
            for tw in 0..grid.width {
                let tok = (tf * grid.height + th) * grid.width + tw;
                let mut k = 0;
                for ch in 0..channels {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let (fi, yi, xi) = (tf * pt + dt, th * ph + dy, tw * pw + dx);
                                out[((ch * f + fi) * h + yi) * w + xi] = src[tok * pd + k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[channels, f, h, w], out)
}

/// 3D rotary tables. The head's rotation pairs are split over the frame,
/// row and column axes; frame gets the remainder.
pub fn rope_table(grid: TokenGrid, head_dim: usize, base: f64) -> RopeTable {
    let pairs = head_dim / 2;
    let per_space = pairs / 3;
    let axes = [
        (pairs - 2 * per_space, 0usize),
        (per_space, 1),
        (per_space, 2),
    ];
    let mut cos = Vec::with_capacity(grid.len() * pairs);
    let mut sin = Vec::with_capacity(grid.len() * pairs);
    for tf in 0..grid.frames {
        for th in 0..grid.height {
            for tw in 0..grid.width {
                let pos = [tf as f64, th as f64, tw as f64];
                for &(n, axis) in &axes {
                    for k in 0..n {
                        let freq = libm::pow(base, -(k as f64) / n as f64);
                        let a = pos[axis] * freq;
                        cos.push(libm::cos(a));
                        sin.push(libm::sin(a));
                    }
                }
            }
        }
    }
    RopeTable {
        tokens: grid.len(),
        pairs,
        cos,
        sin,
    }
}

/// Sinusoidal timestep features, `freq_dim` long.
pub fn timestep_features(t: f64, freq_dim: usize) -> Tensor {
    let half = freq_dim / 2;
    let mut v = alloc::vec![0.0; freq_dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let a = 1000.0 * t * freq;
        v[k] = libm::cos(a);
        v[half + k] = libm::sin(a);
    }
    Tensor::new(&[freq_dim], v)
}

/// `z_t = z_0 + σ_t²·ε` with `σ_t² = t`.
pub fn noise_forward(z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Timestep(t));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs latent {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    Ok(z0.zip_map(eps, |z, e| z + t * e))
}

#[derive(Clone, Debug)]
pub struct Block {
    pub modulation: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Parameter handles for one backbone inside some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub class_table: ParamId,
    pub blocks: Vec<Block>,
    pub final_mod: Linear,
    pub final_out: Linear,
}

/// Output of one pass: per-token predictions plus the hidden state after
/// every block.
pub struct DitOutput {
    pub eps: Var,
    pub hidden: Vec<Var>,
}

impl Dit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let pd = cfg.patch_dim();
        let n = |s: &str| format!("{prefix}{s}");
        let patch_embed = Linear::new(store, &n("patch_embed"), pd, d, Init::FanIn(1.0), true, rng);
        let time_in = Linear::new(
            store,
            &n("time.fc1"),
            cfg.freq_dim,
            d,
            Init::FanIn(1.0),
            true,
            rng,
        );
        let time_out = Linear::new(store, &n("time.fc2"), d, d, Init::FanIn(1.0), true, rng);
        let class_table = store.add(
            n("class_table"),
            Tensor::randn(&[cfg.num_classes + 1, d], 0.02, rng),
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let b = |s: &str| format!("{prefix}blocks.{l}.{s}");
            blocks.push(Block {
                modulation: Linear::new(
                    store,
                    &b("modulation"),
                    d,
                    6 * d,
                    Init::Normal(0.02),
                    true,
                    rng,
                ),
                qkv: Linear::new(store, &b("attn.qkv"), d, 3 * d, Init::FanIn(1.0), true, rng),
                proj: Linear::new(store, &b("attn.proj"), d, d, Init::FanIn(1.0), true, rng),
                fc1: Linear::new(
                    store,
                    &b("mlp.fc1"),
                    d,
                    cfg.mlp_ratio * d,
                    Init::FanIn(1.0),
                    true,
                    rng,
                ),
                fc2: Linear::new(
                    store,
                    &b("mlp.fc2"),
                    cfg.mlp_ratio * d,
                    d,
                    Init::FanIn(1.0),
                    true,
                    rng,
                ),
            });
        }
        let final_mod = Linear::new(
            store,
            &n("final.modulation"),
            d,
            2 * d,
            Init::Normal(0.02),
            true,
            rng,
        );
        let final_out = Linear::new(store, &n("final.out"), d, pd, Init::Normal(0.02), true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            time_in,
            time_out,
            class_table,
            blocks,
            final_mod,
            final_out,
        })
    }

    pub fn grid(&self, latent_shape: &[usize]) -> Result<TokenGrid> {
        if latent_shape.first() != Some(&self.cfg.latent_channels) {
            return Err(Error::Shape(format!(
                "latent {:?} does not have {} channels",
                latent_shape, self.cfg.latent_channels
            )));
        }
        token_grid(latent_shape, self.cfg.patch)
    }

    pub fn rope(&self, grid: TokenGrid) -> Option<Rc<RopeTable>> {
        self.cfg
            .rope
            .then(|| Rc::new(rope_table(grid, self.cfg.head_dim(), self.cfg.rope_base)))
    }

    /// `e(t; θ)`.
    pub fn time_embedding(&self, g: &mut Graph<'_>, t: f64) -> Var {
        let feats = g.constant(timestep_features(t, self.cfg.freq_dim));
        let h = self.time_in.forward(g, feats);
        let h = g.silu(h);
        self.time_out.forward(g, h)
    }

    /// Class embedding; `None` selects the null (unconditional) row.
    pub fn class_embedding(&self, g: &mut Graph<'_>, class: Option<usize>) -> Var {
        let idx = class.unwrap_or(self.cfg.num_classes);
        assert!(
            idx <= self.cfg.num_classes,
            "class {} out of vocabulary",
            idx
        );
        let table = g.param(self.class_table);
        let row = g.gather_rows(table, &[idx]);
        g.reshape(row, &[self.cfg.width])
    }

    /// `e(t) + y`, the conditioning vector shared by all blocks.
    pub fn condition(&self, g: &mut Graph<'_>, t: f64, class: Option<usize>) -> Var {
        let te = self.time_embedding(g, t);
        let ce = self.class_embedding(g, class);
        g.add(te, ce)
    }

    pub fn embed(&self, g: &mut Graph<'_>, tokens: Var) -> Var {
        self.patch_embed.forward(g, tokens)
    }

    pub fn block(
        &self,
        g: &mut Graph<'_>,
        l: usize,
        x: Var,
        cond: Var,
        rope: Option<&Rc<RopeTable>>,
    ) -> Var {
        let d = self.cfg.width;
        let blk = &self.blocks[l];
        let c = g.silu(cond);
        let m = blk.modulation.forward(g, c);
        let chunk = |g: &mut Graph<'_>, i: usize| g.narrow(m, 0, i * d, d);
        let (shift1, scale1, gate1) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
        let (shift2, scale2, gate2) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));

        let h = modulate(g, x, shift1, scale1);
        let a = self.attention(g, blk, h, rope);
        let a = g.mul_bcast(a, gate1);
        let x = g.add(x, a);

        let h = modulate(g, x, shift2, scale2);
        let h = blk.fc1.forward(g, h);
        let h = g.silu(h);
        let h = blk.fc2.forward(g, h);
        let h = g.mul_bcast(h, gate2);
        g.add(x, h)
    }

    fn attention(
        &self,
        g: &mut Graph<'_>,
        blk: &Block,
        x: Var,
        rope: Option<&Rc<RopeTable>>,
    ) -> Var {
        let n = g.shape(x)[0];
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let qkv = blk.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[n, 3, heads, hd]);
        let qkv = g.permute(qkv, &[1, 2, 0, 3]);
        let part = |g: &mut Graph<'_>, i: usize| {
            let p = g.narrow(qkv, 0, i, 1);
            g.reshape(p, &[heads, n, hd])
        };
        let (mut q, mut k, v) = (part(g, 0), part(g, 1), part(g, 2));
        if let Some(table) = rope {
            q = g.rope(q, table.clone());
            k = g.rope(k, table.clone());
        }
        let kt = g.transpose_last(k);
        let s = g.matmul(q, kt);
        let s = g.scale(s, 1.0 / libm::sqrt(hd as f64));
        let p = g.softmax(s);
        let o = g.matmul(p, v);
        let o = g.permute(o, &[1, 0, 2]);
        let o = g.reshape(o, &[n, heads * hd]);
        blk.proj.forward(g, o)
    }

    /// Modulated features fed to the output projection.
    pub fn head_features(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let d = self.cfg.width;
        let c = g.silu(cond);
        let m = self.final_mod.forward(g, c);
        let shift = g.narrow(m, 0, 0, d);
        let scale = g.narrow(m, 0, d, d);
        modulate(g, x, shift, scale)
    }

    pub fn head(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let h = self.head_features(g, x, cond);
        self.final_out.forward(g, h)
    }

    /// Runs every block on already-embedded tokens.
    pub fn run_blocks(
        &self,
        g: &mut Graph<'_>,
        mut x: Var,
        cond: Var,
        rope: Option<&Rc<RopeTable>>,
    ) -> (Var, Vec<Var>) {
        let mut hidden = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            x = self.block(g, l, x, cond, rope);
            hidden.push(x);
        }
        (x, hidden)
    }

    /// Full pass over patch tokens `[n, patch_dim]`.
    pub fn forward_tokens(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        cond: Var,
        rope: Option<&Rc<RopeTable>>,
    ) -> DitOutput {
        let x = self.embed(g, tokens);
        let (x, hidden) = self.run_blocks(g, x, cond, rope);
        let eps = self.head(g, x, cond);
        DitOutput { eps, hidden }
    }

    /// Full pass on a noisy latent `[c, f, h, w]`.
    pub fn denoise(
        &self,
        g: &mut Graph<'_>,
        z_t: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<DitOutput> {
        let grid = self.grid(z_t.shape())?;
        let rope = self.rope(grid);
        let tokens = g.constant(patchify(z_t, self.cfg.patch)?);
        let cond = self.condition(g, t, class);
        Ok(self.forward_tokens(g, tokens, cond, rope.as_ref()))
    }
}

fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x, 1e-6);
    let s1 = g.add_scalar(scale, 1.0);
    let h = g.mul_bcast(h, s1);
    g.add_bcast(h, shift)
}

/// A clean latent with its scene class.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentExample {
    pub latent: Tensor,
    pub class: usize,
}

/// One forward-process draw: a timestep, its noise, and whether the class
/// is dropped to the null condition.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: f64,
    pub class: Option<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        shape: &[usize],
        class: usize,
        cond_dropout: f64,
    ) -> Self {
        let t: f64 = rng.random();
        let drop = rng.random::<f64>() < cond_dropout;
        let eps = Tensor::randn(shape, 1.0, rng);
        Self {
            t,
            class: (!drop).then_some(class),
            eps,
        }
    }
}

/// The noise-prediction loss averaged over a batch, with the predictor
/// supplied by the caller. `predict` receives `(graph, example index, z_t,
/// class, t)` and returns per-token predictions `[n, patch_dim]`.
pub fn diffusion_loss_with<R, F>(
    g: &mut Graph<'_>,
    batch: &[LatentExample],
    patch: [usize; 3],
    cond_dropout: f64,
    rng: &mut R,
    mut predict: F,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Graph<'_>, usize, &Tensor, Option<usize>, f64) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let draw = NoiseDraw::sample(rng, ex.latent.shape(), ex.class, cond_dropout);
        let z_t = noise_forward(&ex.latent, draw.t, &draw.eps)?;
        let pred = predict(g, i, &z_t, draw.class, draw.t)?;
        let target = g.constant(patchify(&draw.eps, patch)?);
        losses.push(g.mse(pred, target));
    }
    Ok(mean_of(g, &losses))
}

pub(crate) fn mean_of(g: &mut Graph<'_>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// A single-stream denoiser owning its parameters.
#[derive(Clone, Debug)]
pub struct SingleStream {
    pub store: ParamStore,
    pub dit: Dit,
}

impl SingleStream {
    pub const PREFIX: &'static str = "dit.";

    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let dit = Dit::new(&mut store, Self::PREFIX, cfg, &mut rng)?;
        Ok(Self { store, dit })
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn denoise(
        &self,
        g: &mut Graph<'_>,
        z_t: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<DitOutput> {
        self.dit.denoise(g, z_t, class, t)
    }

    pub fn diffusion_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        batch: &[LatentExample],
        rng: &mut R,
    ) -> Result<Var> {
        let dit = &self.dit;
        diffusion_loss_with(
            g,
            batch,
            dit.cfg.patch,
            dit.cfg.cond_dropout,
            rng,
            |g, _, z, c, t| Ok(dit.denoise(g, z, c, t)?.eps),
        )
    }

    /// Noise prediction as a latent tensor, evaluated without gradients.
    pub fn predict(&self, z_t: &Tensor, class: Option<usize>, t: f64) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.store);
        let out = self.denoise(&mut g, z_t, class, t)?;
        let grid = self.dit.grid(z_t.shape())?;
        Ok(unpatchify(
            g.value(out.eps),
            self.dit.cfg.latent_channels,
            grid,
            self.dit.cfg.patch,
        ))
    }
}

/// Standard-normal tensor from a seed.
pub fn seeded_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}
