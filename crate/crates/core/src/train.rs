//! Minibatch training loop shared by both training stages.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bct::{JointExample, Teacher};
use crate::dit::{LatentExample, SingleStream};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Graph, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Draws minibatches from reshuffled epochs; a batch may straddle two
/// epochs.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Scalar loss values recorded after one optimiser step. `parts` holds the
/// objective's named components in [`Objective::part_names`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub parts: Vec<f64>,
    pub grad_norm: f64,
}

/// A trainable loss over a dataset indexed `0..len()`.
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn len(&self) -> usize;
    fn part_names(&self) -> &'static [&'static str];
    /// Total loss and its components for the given example indices.
    fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)>;
    /// Parameters updated by the optimiser; others receive no update.
    fn trainable(&self, _index: usize) -> bool {
        true
    }
    /// Per-parameter learning-rate multiplier.
    fn lr_scale(&self, _index: usize) -> f64 {
        1.0
    }
}

/// Runs `cfg.steps` AdamW steps. `on_step` sees each log and the updated
/// objective, e.g. to write checkpoints. A non-finite loss aborts the run.
pub fn train<O, F>(obj: &mut O, cfg: &TrainConfig, mut on_step: F) -> Result<Vec<StepLog>>
where
    O: Objective,
    F: FnMut(&StepLog, &O) -> Result<()>,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut batches = BatchSampler::new(obj.len(), cfg.seed)?;
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise.set_stream(1);
    let mut opt = AdamW::new(cfg.optim.clone(), obj.store());
    let scales: Vec<f64> = (0..obj.store().len()).map(|i| obj.lr_scale(i)).collect();
    let uniform = scales.iter().all(|&s| s == 1.0);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch(cfg.batch_size);
        let (loss, parts, mut grads) = {
            let mut g = Graph::new(obj.store());
            let (total, parts) = obj.loss(&mut g, &idx, &mut noise)?;
            let loss = g.value(total).item();
            let parts: Vec<f64> = parts.iter().map(|&p| g.value(p).item()).collect();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss {loss}, parts {parts:?}"),
                });
            }
            (loss, parts, g.backward_params(total))
        };
        for (i, gr) in grads.iter_mut().enumerate() {
            if !obj.trainable(i) {
                *gr = None;
            }
        }
        let grad_norm = if uniform {
            opt.step(obj.store_mut(), &grads)
        } else {
            opt.step_scaled(obj.store_mut(), &grads, &scales)
        };
        let log = StepLog {
            step,
            loss,
            parts,
            grad_norm,
        };
        on_step(&log, obj)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Stage I: the joint objective over paired latents.
pub struct JointObjective<'a> {
    pub teacher: &'a mut Teacher,
    pub data: &'a [JointExample],
}

impl Objective for JointObjective<'_> {
    fn store(&self) -> &ParamStore {
        self.teacher.store()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.teacher.store_mut()
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn part_names(&self) -> &'static [&'static str] {
        &["rgb", "percep"]
    }
    fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let b: Vec<JointExample> = batch.iter().map(|&i| self.data[i].clone()).collect();
        let l = self.teacher.joint_loss(g, &b, rng)?;
        Ok((l.total, alloc::vec![l.rgb, l.percep]))
    }
}

/// RGB-only objective for a single-stream baseline.
pub struct SingleObjective<'a> {
    pub model: &'a mut SingleStream,
    pub data: &'a [LatentExample],
}

impl Objective for SingleObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn len(&self) -> usize {
        self.data.len()
    }
    fn part_names(&self) -> &'static [&'static str] {
        &["rgb"]
    }
    fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let b: Vec<LatentExample> = batch.iter().map(|&i| self.data[i].clone()).collect();
        let l = self.model.diffusion_loss(g, &b, rng)?;
        Ok((l, alloc::vec![l]))
    }
}

pub fn stage1_train<F>(
    teacher: &mut Teacher,
    data: &[JointExample],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &Teacher) -> Result<()>,
{
    let mut obj = JointObjective { teacher, data };
    train(&mut obj, cfg, |log, o| on_step(log, o.teacher))
}

/// Mean of the first and last `window` values of a series.
pub fn window_means(xs: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || xs.len() < window {
        return None;
    }
    let head = xs[..window].iter().sum::<f64>() / window as f64;
    let tail = xs[xs.len() - window..].iter().sum::<f64>() / window as f64;
    Some((head, tail))
}
