//! Relation-alignment distillation of a parallel teacher into a
//! single-stream RGB student.
//!
//! At every linked block the student's (projected) hidden tokens are
//! compared with the teacher's post-link RGB states through their cosine
//! relation maps: token-token within each frame, and frame-frame at each
//! spatial site.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bct::{JointDraw, JointExample, ParallelTeacher};
use crate::dit::{mean_of, noise_forward, patchify, Dit, SingleStream, TokenGrid};
use crate::nn::{Init, Linear};
use crate::optim::AdamWConfig;
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;
use crate::train::{train, Objective, StepLog, TrainConfig};
use crate::{Error, Result};

/// `[f, n_s, n_s]` cosine similarities between tokens of the same frame.
pub fn relation_spatial(g: &mut Graph<'_>, x: Var) -> Var {
    let u = g.l2_normalize(x);
    let ut = g.transpose_last(u);
    g.matmul(u, ut)
}

/// `[n_s, f, f]` cosine similarities between frames at the same site.
pub fn relation_temporal(g: &mut Graph<'_>, x: Var) -> Var {
    let p = g.permute(x, &[1, 0, 2]);
    relation_spatial(g, p)
}

/// Two-layer SiLU MLP from student width to teacher width.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub const PREFIX: &'static str = "proj.";

    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, "proj.fc1", d, 2 * d, Init::FanIn(1.0), true, rng);
        let fc2 = Linear::new(store, "proj.fc2", 2 * d, d, Init::FanIn(1.0), true, rng);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Mean over block pairs of the spatial plus temporal relation gaps. Hidden
/// states are token matrices `[grid.len(), d]` in frame-major order;
/// `projector = None` compares the student states directly.
pub fn distill_loss(
    g: &mut Graph<'_>,
    teacher: &[Var],
    student: &[Var],
    projector: Option<&Projector>,
    grid: TokenGrid,
) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::BlockSet(format!(
            "{} teacher vs {} student states",
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (&ht, &hs) in teacher.iter().zip(student) {
        let hs = match projector {
            Some(p) => p.forward(g, hs),
            None => hs,
        };
        let d = *g.shape(ht).last().unwrap();
        let shape = [grid.frames, grid.spatial(), d];
        let ht = g.reshape(ht, &shape);
        let hs = g.reshape(hs, &shape);
        let gap = |g: &mut Graph<'_>, rel: fn(&mut Graph<'_>, Var) -> Var| {
            let a = rel(g, ht);
            let b = rel(g, hs);
            let diff = g.sub(a, b);
            let diff = g.abs(diff);
            g.mean(diff)
        };
        let spa = gap(g, relation_spatial);
        let temp = gap(g, relation_temporal);
        terms.push(g.add(spa, temp));
    }
    Ok(mean_of(g, &terms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the relation term.
    pub lambda: f64,
    /// Learning-rate multiplier for the projector.
    pub projector_lr_scale: f64,
    /// Regress projected features directly (MSE) instead of relations.
    pub feature_mse: bool,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            projector_lr_scale: 1.0,
            feature_mse: false,
            train: TrainConfig {
                steps: 200,
                optim: AdamWConfig {
                    lr: 2e-5,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

/// Student backbone plus projector in one store; the backbone parameters
/// come first and carry the `dit.` names of a [`SingleStream`].
#[derive(Clone, Debug)]
pub struct Distiller {
    pub store: ParamStore,
    pub dit: Dit,
    pub projector: Projector,
    /// 1-based aligned blocks.
    pub blocks: Vec<usize>,
    n_student: usize,
}

impl Distiller {
    /// Copies the teacher's shared backbone and folds the RGB task
    /// embeddings into the biases they are added to, so the student starts
    /// as the teacher's RGB branch without links.
    pub fn from_teacher(teacher: &ParallelTeacher, seed: u64) -> Result<Self> {
        if teacher.link_blocks.is_empty() {
            return Err(Error::BlockSet(
                "teacher has no linked blocks to align".into(),
            ));
        }
        let mut store = ParamStore::new();
        for (_, name, t) in teacher
            .store
            .iter()
            .take_while(|(_, n, _)| n.starts_with(SingleStream::PREFIX))
        {
            store.add(name, t.clone());
        }
        let n_student = store.len();
        let dit = teacher.dit.clone();
        let fold = |store: &mut ParamStore, bias: Option<crate::params::ParamId>, e: &Tensor| {
            store.get_mut(bias.expect("biased layer")).add_assign(e);
        };
        fold(
            &mut store,
            dit.time_out.b,
            teacher.store.get(teacher.time_rgb),
        );
        fold(
            &mut store,
            dit.patch_embed.b,
            teacher.store.get(teacher.token_rgb),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector = Projector::new(&mut store, dit.cfg.width, &mut rng);
        Ok(Self {
            store,
            dit,
            projector,
            blocks: teacher.link_blocks.clone(),
            n_student,
        })
    }

    pub fn num_student_params(&self) -> usize {
        self.n_student
    }

    /// The student as a standalone single-stream model.
    pub fn export_student(&self) -> SingleStream {
        let mut store = ParamStore::new();
        for (_, name, t) in self.store.iter().take(self.n_student) {
            store.add(name, t.clone());
        }
        SingleStream {
            store,
            dit: self.dit.clone(),
        }
    }
}

/// Stage II objective: RGB diffusion loss plus `lambda` times the relation
/// loss against the frozen teacher run on both modalities.
pub struct DistillObjective<'a> {
    pub distiller: &'a mut Distiller,
    pub teacher: &'a ParallelTeacher,
    pub data: &'a [JointExample],
    pub cfg: &'a DistillConfig,
}

impl DistillObjective<'_> {
    pub fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &JointExample,
        draw: &JointDraw,
    ) -> Result<(Var, Var)> {
        let s = &*self.distiller;
        let zr = noise_forward(&ex.rgb, draw.t, &draw.eps_rgb)?;
        let zp = noise_forward(&ex.percep, draw.t, &draw.eps_percep)?;
        let teacher_states: Vec<Tensor> = {
            let mut tg = Graph::frozen(&self.teacher.store);
            let out = self
                .teacher
                .forward(&mut tg, &zr, &zp, draw.class, draw.t, true)?;
            s.blocks
                .iter()
                .map(|&l| tg.value(out.hidden_rgb[l - 1]).clone())
                .collect()
        };
        let out = s.dit.denoise(g, &zr, draw.class, draw.t)?;
        let target = g.constant(patchify(&draw.eps_rgb, s.dit.cfg.patch)?);
        let diff = g.mse(out.eps, target);
        let th: Vec<Var> = teacher_states.into_iter().map(|t| g.constant(t)).collect();
        let sh: Vec<Var> = s.blocks.iter().map(|&l| out.hidden[l - 1]).collect();
        let dist = if self.cfg.feature_mse {
            let terms: Vec<Var> = th
                .iter()
                .zip(&sh)
                .map(|(&t, &h)| {
                    let p = s.projector.forward(g, h);
                    g.mse(p, t)
                })
                .collect();
            mean_of(g, &terms)
        } else {
            let grid = s.dit.grid(ex.rgb.shape())?;
            distill_loss(g, &th, &sh, Some(&s.projector), grid)?
        };
        Ok((diff, dist))
    }
}

impl Objective for DistillObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.distiller.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.distiller.store
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn part_names(&self) -> &'static [&'static str] {
        &["diffusion", "distill"]
    }
    fn lr_scale(&self, index: usize) -> f64 {
        if index < self.distiller.n_student {
            1.0
        } else {
            self.cfg.projector_lr_scale
        }
    }
    fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (mut diffs, mut dists) = (Vec::new(), Vec::new());
        for &i in batch {
            let ex = &self.data[i];
            let draw = JointDraw::sample(rng, ex, self.distiller.dit.cfg.cond_dropout);
            let (a, b) = self.example_loss(g, ex, &draw)?;
            diffs.push(a);
            dists.push(b);
        }
        let diff = mean_of(g, &diffs);
        let dist = mean_of(g, &dists);
        let total = if self.cfg.lambda == 0.0 {
            diff
        } else {
            let w = g.scale(dist, self.cfg.lambda);
            g.add(diff, w)
        };
        Ok((total, alloc::vec![diff, dist]))
    }
}

pub fn stage2_train<F>(
    distiller: &mut Distiller,
    teacher: &ParallelTeacher,
    data: &[JointExample],
    cfg: &DistillConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &Distiller) -> Result<()>,
{
    let mut obj = DistillObjective {
        distiller,
        teacher,
        data,
        cfg,
    };
    train(&mut obj, &cfg.train, |log, o| on_step(log, o.distiller))
}
