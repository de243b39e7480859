//! Joint RGB + perception denoisers.
//!
//! [`ParallelTeacher`] runs one shared backbone twice, once per modality,
//! with per-modality task embeddings and zero-initialised linear links that
//! exchange hidden states between the two branches. [`ChannelFusion`] and
//! [`SpatialFusion`] are single-stream alternatives that concatenate the
//! modalities on the channel or width axis.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RopeTable, Var};
use crate::dit::{
    mean_of, noise_forward, patchify, unpatchify, BackboneConfig, Dit, DitOutput, TokenGrid,
};
use crate::nn::{Init, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::sampler::SamplerConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Parallel,
    Channel,
    Spatial,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Parallel, Arch::Channel, Arch::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Parallel => "parallel",
            Arch::Channel => "channel",
            Arch::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Percep,
}

/// Every third block counted back from the last, e.g. `{2, 5, 8}` for 8
/// blocks. Indices are 1-based.
pub fn default_link_blocks(depth: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=depth).rev().step_by(3).collect();
    v.reverse();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub backbone: BackboneConfig,
    pub arch: Arch,
    /// 1-based blocks followed by a link pair; default every third block.
    pub link_blocks: Option<Vec<usize>>,
    /// Extra link pair between token embedding and the first block.
    pub pre_links: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            arch: Arch::Parallel,
            link_blocks: None,
            pre_links: true,
        }
    }
}

impl TeacherConfig {
    pub fn resolved_link_blocks(&self) -> Result<Vec<usize>> {
        let k = self.backbone.depth;
        let s = self
            .link_blocks
            .clone()
            .unwrap_or_else(|| default_link_blocks(k));
        if s.iter().any(|&l| l == 0 || l > k) || s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BlockSet(format!(
                "link blocks {:?} must be increasing within 1..={}",
                s, k
            )));
        }
        Ok(s)
    }
}

/// A clean RGB latent with its paired perception latent.
#[derive(Clone, Debug, PartialEq)]
pub struct JointExample {
    pub rgb: Tensor,
    pub percep: Tensor,
    pub class: usize,
}

/// Token-space predictions of a joint pass.
pub struct JointPrediction {
    pub eps_rgb: Var,
    pub eps_percep: Var,
    /// RGB-branch state after each block (post-link where links apply).
    pub hidden_rgb: Vec<Var>,
    pub hidden_percep: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinkPair {
    /// 0 for the pre-transformer pair, otherwise the 1-based block it follows.
    pub block: usize,
    pub to_rgb: Linear,
    pub to_percep: Linear,
}

#[derive(Clone, Debug)]
pub struct ParallelTeacher {
    pub store: ParamStore,
    pub dit: Dit,
    pub time_rgb: ParamId,
    pub time_percep: ParamId,
    pub token_rgb: ParamId,
    pub token_percep: ParamId,
    pub links: Vec<LinkPair>,
    pub link_blocks: Vec<usize>,
}

impl ParallelTeacher {
    pub fn new(cfg: &TeacherConfig) -> Result<Self> {
        let link_blocks = cfg.resolved_link_blocks()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.init_seed);
        let dit = Dit::new(&mut store, "dit.", &cfg.backbone, &mut rng)?;
        let d = cfg.backbone.width;
        let time_rgb = store.add("task.time_rgb", Tensor::zeros(&[d]));
        let time_percep = store.add("task.time_percep", Tensor::zeros(&[d]));
        let token_rgb = store.add("task.token_rgb", Tensor::randn(&[d], 0.02, &mut rng));
        let token_percep = store.add("task.token_percep", Tensor::randn(&[d], 0.02, &mut rng));
        let mut links = Vec::new();
        let blocks = cfg
            .pre_links
            .then_some(0)
            .into_iter()
            .chain(link_blocks.iter().copied());
        for block in blocks {
            let tag = if block == 0 {
                "pre".into()
            } else {
                format!("{block}")
            };
            let mut link = |dir: &str| {
                Linear::new(
                    &mut store,
                    &format!("links.{tag}.{dir}"),
                    d,
                    d,
                    Init::Zeros,
                    true,
                    &mut rng,
                )
            };
            let to_rgb = link("to_rgb");
            let to_percep = link("to_percep");
            links.push(LinkPair {
                block,
                to_rgb,
                to_percep,
            });
        }
        Ok(Self {
            store,
            dit,
            time_rgb,
            time_percep,
            token_rgb,
            token_percep,
            links,
            link_blocks,
        })
    }

    pub fn link_scalars(&self) -> usize {
        self.links
            .iter()
            .map(|l| l.to_rgb.num_scalars() + l.to_percep.num_scalars())
            .sum()
    }

    fn cond(&self, g: &mut Graph<'_>, t: f64, class: Option<usize>, m: Modality) -> Var {
        let te = self.dit.time_embedding(g, t);
        let task = g.param(match m {
            Modality::Rgb => self.time_rgb,
            Modality::Percep => self.time_percep,
        });
        let te = g.add(te, task);
        let ce = self.dit.class_embedding(g, class);
        g.add(te, ce)
    }

    fn embed(&self, g: &mut Graph<'_>, tokens: Var, m: Modality) -> Var {
        let x = self.dit.embed(g, tokens);
        let e = g.param(match m {
            Modality::Rgb => self.token_rgb,
            Modality::Percep => self.token_percep,
        });
        g.add_bcast(x, e)
    }

    fn cross(g: &mut Graph<'_>, pair: &LinkPair, xr: Var, xp: Var) -> (Var, Var) {
        let into_rgb = pair.to_rgb.forward(g, xp);
        let into_percep = pair.to_percep.forward(g, xr);
        (g.add(xr, into_rgb), g.add(xp, into_percep))
    }

    /// Dual-stream pass in token space; `links = false` runs the two
    /// branches fully independently.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tokens(
        &self,
        g: &mut Graph<'_>,
        tok_rgb: Var,
        tok_percep: Var,
        class: Option<usize>,
        t: f64,
        rope: Option<&Rc<RopeTable>>,
        links: bool,
    ) -> JointPrediction {
        let cr = self.cond(g, t, class, Modality::Rgb);
        let cp = self.cond(g, t, class, Modality::Percep);
        let mut xr = self.embed(g, tok_rgb, Modality::Rgb);
        let mut xp = self.embed(g, tok_percep, Modality::Percep);
        let link_at = |block: usize| {
            self.links
                .iter()
                .find(|l| l.block == block)
                .filter(|_| links)
        };
        if let Some(pair) = link_at(0) {
            (xr, xp) = Self::cross(g, pair, xr, xp);
        }
        let mut hidden_rgb = Vec::with_capacity(self.dit.cfg.depth);
        let mut hidden_percep = Vec::with_capacity(self.dit.cfg.depth);
        for l in 0..self.dit.cfg.depth {
            xr = self.dit.block(g, l, xr, cr, rope);
            xp = self.dit.block(g, l, xp, cp, rope);
            if let Some(pair) = link_at(l + 1) {
                (xr, xp) = Self::cross(g, pair, xr, xp);
            }
            hidden_rgb.push(xr);
            hidden_percep.push(xp);
        }
        let eps_rgb = self.dit.head(g, xr, cr);
        let eps_percep = self.dit.head(g, xp, cp);
        JointPrediction {
            eps_rgb,
            eps_percep,
            hidden_rgb,
            hidden_percep,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        z_rgb: &Tensor,
        z_percep: &Tensor,
        class: Option<usize>,
        t: f64,
        links: bool,
    ) -> Result<JointPrediction> {
        same_shape(z_rgb, z_percep)?;
        let grid = self.dit.grid(z_rgb.shape())?;
        let rope = self.dit.rope(grid);
        let tr = g.constant(patchify(z_rgb, self.dit.cfg.patch)?);
        let tp = g.constant(patchify(z_percep, self.dit.cfg.patch)?);
        Ok(self.forward_tokens(g, tr, tp, class, t, rope.as_ref(), links))
    }

    /// One branch on its own, no links.
    pub fn branch_forward(
        &self,
        g: &mut Graph<'_>,
        z: &Tensor,
        class: Option<usize>,
        t: f64,
        m: Modality,
    ) -> Result<DitOutput> {
        let grid = self.dit.grid(z.shape())?;
        let rope = self.dit.rope(grid);
        let tokens = g.constant(patchify(z, self.dit.cfg.patch)?);
        let c = self.cond(g, t, class, m);
        let x = self.embed(g, tokens, m);
        let (x, hidden) = self.dit.run_blocks(g, x, c, rope.as_ref());
        let eps = self.dit.head(g, x, c);
        Ok(DitOutput { eps, hidden })
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "modalities differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Single stream over channel-concatenated tokens. The perception input
/// projection starts at zero and its output head starts as a copy of the
/// RGB head.
#[derive(Clone, Debug)]
pub struct ChannelFusion {
    pub store: ParamStore,
    pub dit: Dit,
    pub extra_in: Linear,
    pub extra_out: Linear,
}

impl ChannelFusion {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let dit = Dit::new(&mut store, "dit.", cfg, &mut rng)?;
        let (d, p) = (cfg.width, cfg.patch_dim());
        let extra_in = Linear::new(
            &mut store,
            "fusion.extra_in",
            p,
            d,
            Init::Zeros,
            false,
            &mut rng,
        );
        let extra_out = Linear::new(
            &mut store,
            "fusion.extra_out",
            d,
            p,
            Init::Zeros,
            true,
            &mut rng,
        );
        *store.get_mut(extra_out.w) = store.get(dit.final_out.w).clone();
        *store.get_mut(extra_out.b.unwrap()) = store.get(dit.final_out.b.unwrap()).clone();
        Ok(Self {
            store,
            dit,
            extra_in,
            extra_out,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        z_rgb: &Tensor,
        z_percep: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<JointPrediction> {
        same_shape(z_rgb, z_percep)?;
        let grid = self.dit.grid(z_rgb.shape())?;
        let rope = self.dit.rope(grid);
        let tr = g.constant(patchify(z_rgb, self.dit.cfg.patch)?);
        let tp = g.constant(patchify(z_percep, self.dit.cfg.patch)?);
        let c = self.dit.condition(g, t, class);
        let xr = self.dit.embed(g, tr);
        let xp = self.extra_in.forward(g, tp);
        let x = g.add(xr, xp);
        let (x, hidden) = self.dit.run_blocks(g, x, c, rope.as_ref());
        let h = self.dit.head_features(g, x, c);
        let eps_rgb = self.dit.final_out.forward(g, h);
        let eps_percep = self.extra_out.forward(g, h);
        Ok(JointPrediction {
            eps_rgb,
            eps_percep,
            hidden_percep: hidden.clone(),
            hidden_rgb: hidden,
        })
    }
}

/// Single stream over both token grids placed side by side on the width
/// axis, so rotary width positions separate the halves.
#[derive(Clone, Debug)]
pub struct SpatialFusion {
    pub store: ParamStore,
    pub dit: Dit,
}

impl SpatialFusion {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let dit = Dit::new(&mut store, "dit.", cfg, &mut rng)?;
        Ok(Self { store, dit })
    }

    /// Row indices of each half inside the joint token sequence.
    pub fn halves(grid: TokenGrid) -> (Vec<usize>, Vec<usize>) {
        let half = grid.width / 2;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for tf in 0..grid.frames {
            for th in 0..grid.height {
                for tw in 0..grid.width {
                    let i = (tf * grid.height + th) * grid.width + tw;
                    if tw < half {
                        a.push(i)
                    } else {
                        b.push(i)
                    }
                }
            }
        }
        (a, b)
    }

    pub fn joint_grid(&self, shape: &[usize]) -> Result<TokenGrid> {
        self.dit.grid(&[shape[0], shape[1], shape[2], 2 * shape[3]])
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        z_rgb: &Tensor,
        z_percep: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<JointPrediction> {
        same_shape(z_rgb, z_percep)?;
        self.dit.grid(z_rgb.shape())?;
        let joint = Tensor::concat(&[z_rgb, z_percep], 3);
        let out = self.dit.denoise(g, &joint, class, t)?;
        let grid = self.joint_grid(z_rgb.shape())?;
        let (a, b) = Self::halves(grid);
        let eps_rgb = g.gather_rows(out.eps, &a);
        let eps_percep = g.gather_rows(out.eps, &b);
        Ok(JointPrediction {
            eps_rgb,
            eps_percep,
            hidden_percep: out.hidden.clone(),
            hidden_rgb: out.hidden,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Teacher {
    Parallel(ParallelTeacher),
    Channel(ChannelFusion),
    Spatial(SpatialFusion),
}

/// Joint loss and its per-modality parts.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub rgb: Var,
    pub percep: Var,
}

/// A shared-time draw for one joint example: `t`, class dropout, then one
/// noise tensor per modality.
pub struct JointDraw {
    pub t: f64,
    pub class: Option<usize>,
    pub eps_rgb: Tensor,
    pub eps_percep: Tensor,
}

impl JointDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, ex: &JointExample, cond_dropout: f64) -> Self {
        let t: f64 = rng.random();
        let drop = rng.random::<f64>() < cond_dropout;
        let eps_rgb = Tensor::randn(ex.rgb.shape(), 1.0, rng);
        let eps_percep = Tensor::randn(ex.percep.shape(), 1.0, rng);
        Self {
            t,
            class: (!drop).then_some(ex.class),
            eps_rgb,
            eps_percep,
        }
    }
}

impl Teacher {
    pub fn new(cfg: &TeacherConfig) -> Result<Self> {
        Ok(match cfg.arch {
            Arch::Parallel => Teacher::Parallel(ParallelTeacher::new(cfg)?),
            Arch::Channel => Teacher::Channel(ChannelFusion::new(&cfg.backbone)?),
            Arch::Spatial => Teacher::Spatial(SpatialFusion::new(&cfg.backbone)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Teacher::Parallel(_) => Arch::Parallel,
            Teacher::Channel(_) => Arch::Channel,
            Teacher::Spatial(_) => Arch::Spatial,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Teacher::Parallel(m) => &m.store,
            Teacher::Channel(m) => &m.store,
            Teacher::Spatial(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Teacher::Parallel(m) => &mut m.store,
            Teacher::Channel(m) => &mut m.store,
            Teacher::Spatial(m) => &mut m.store,
        }
    }

    pub fn dit(&self) -> &Dit {
        match self {
            Teacher::Parallel(m) => &m.dit,
            Teacher::Channel(m) => &m.dit,
            Teacher::Spatial(m) => &m.dit,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        z_rgb: &Tensor,
        z_percep: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<JointPrediction> {
        match self {
            Teacher::Parallel(m) => m.forward(g, z_rgb, z_percep, class, t, true),
            Teacher::Channel(m) => m.forward(g, z_rgb, z_percep, class, t),
            Teacher::Spatial(m) => m.forward(g, z_rgb, z_percep, class, t),
        }
    }

    /// Mean of the two noise-prediction losses over the batch.
    pub fn joint_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        batch: &[JointExample],
        rng: &mut R,
    ) -> Result<JointLoss> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let patch = self.dit().cfg.patch;
        let (mut lr, mut lp) = (Vec::new(), Vec::new());
        for ex in batch {
            let d = JointDraw::sample(rng, ex, self.dit().cfg.cond_dropout);
            let zr = noise_forward(&ex.rgb, d.t, &d.eps_rgb)?;
            let zp = noise_forward(&ex.percep, d.t, &d.eps_percep)?;
            let out = self.forward(g, &zr, &zp, d.class, d.t)?;
            let tr = g.constant(patchify(&d.eps_rgb, patch)?);
            let tp = g.constant(patchify(&d.eps_percep, patch)?);
            lr.push(g.mse(out.eps_rgb, tr));
            lp.push(g.mse(out.eps_percep, tp));
        }
        let rgb = mean_of(g, &lr);
        let percep = mean_of(g, &lp);
        let sum = g.add(rgb, percep);
        let total = g.scale(sum, 0.5);
        Ok(JointLoss { total, rgb, percep })
    }

    /// Latent-shaped noise estimates for both modalities.
    pub fn predict(
        &self,
        z_rgb: &Tensor,
        z_percep: &Tensor,
        class: Option<usize>,
        t: f64,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::frozen(self.store());
        let out = self.forward(&mut g, z_rgb, z_percep, class, t)?;
        let dit = self.dit();
        let grid = dit.grid(z_rgb.shape())?;
        let c = dit.cfg.latent_channels;
        Ok((
            unpatchify(g.value(out.eps_rgb), c, grid, dit.cfg.patch),
            unpatchify(g.value(out.eps_percep), c, grid, dit.cfg.patch),
        ))
    }

    /// Joint reverse sampling of both modalities with the update used by
    /// [`crate::sampler`].
    pub fn sample_joint(
        &self,
        shape: &[usize],
        class: Option<usize>,
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        if cfg.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let n = cfg.steps;
        let mut zr = crate::dit::seeded_noise(shape, seed);
        let mut zp = crate::dit::seeded_noise(shape, seed ^ 0x9e37_79b9_7f4a_7c15);
        for k in (1..=n).rev() {
            let t = k as f64 / n as f64;
            let s = (k - 1) as f64 / n as f64;
            let (mut er, mut ep) = self.predict(&zr, &zp, class, t)?;
            if cfg.guidance != 1.0 && class.is_some() {
                let (ur, up) = self.predict(&zr, &zp, None, t)?;
                er = ur.zip_map(&er, |u, c| u + cfg.guidance * (c - u));
                ep = up.zip_map(&ep, |u, c| u + cfg.guidance * (c - u));
            }
            let step = |z: &Tensor, e: &Tensor| {
                let z0 = z.zip_map(e, |zv, ev| zv - t * ev);
                if k == 1 {
                    z0
                } else {
                    z0.zip_map(e, |a, ev| a + s * ev)
                }
            };
            zr = step(&zr, &er);
            zp = step(&zp, &ep);
        }
        Ok((zr, zp))
    }
}

/// The RGB branch of a parallel teacher alone, without links.
pub struct RgbBranch<'a>(pub &'a ParallelTeacher);

impl crate::sampler::Denoiser for RgbBranch<'_> {
    fn predict_noise(&self, z_t: &Tensor, class: Option<usize>, t: f64) -> Result<Tensor> {
        let m = self.0;
        let mut g = Graph::frozen(&m.store);
        let out = m.branch_forward(&mut g, z_t, class, t, Modality::Rgb)?;
        let grid = m.dit.grid(z_t.shape())?;
        Ok(unpatchify(
            g.value(out.eps),
            m.dit.cfg.latent_channels,
            grid,
            m.dit.cfg.patch,
        ))
    }
}
