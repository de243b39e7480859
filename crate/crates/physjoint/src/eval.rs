//! Held-out diffusion loss and ToyPC scoring of sample sets.

use physjoint_core::bct::{JointExample, ParallelTeacher, RgbBranch, Teacher};
use physjoint_core::codec::{decode_tensor, CodecConfig};
use physjoint_core::dit::{noise_forward, SingleStream};
use physjoint_core::sampler::{sample, Denoiser, SamplerConfig};
use physjoint_core::tensor::Tensor;
use physjoint_core::toypc::{aggregate, evaluate_sample, DetectorConfig, ToyPcReport};
use physjoint_core::video::VideoClip;
use physjoint_core::world::{Camera, SceneClass, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model whose noise predictions can be scored on held-out latents.
#[derive(Clone, Copy)]
pub enum Scored<'a> {
    /// Both modalities through the full teacher.
    Joint(&'a Teacher),
    /// RGB branch of a parallel teacher with the links switched off.
    RgbBranch(&'a ParallelTeacher),
    Single(&'a SingleStream),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValLoss {
    /// Mean of the two modality losses; only for joint models.
    pub joint: Option<f64>,
    pub rgb: f64,
    pub percep: Option<f64>,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| (x - y) * (x - y)).mean()
}

/// Conditional noise-prediction MSE averaged over `draws` seeded
/// `(t, ε)` draws per example. Every model sees the same draws.
pub fn validation_loss(
    model: Scored,
    data: &[JointExample],
    draws: usize,
    seed: u64,
) -> Result<ValLoss> {
    if data.is_empty() || draws == 0 {
        return Err(Error::Config(
            "validation needs at least one clip and one draw".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rgb, mut percep) = (0.0, 0.0);
    for ex in data {
        for _ in 0..draws {
            let t: f64 = rng.random();
            let er = Tensor::randn(ex.rgb.shape(), 1.0, &mut rng);
            let ep = Tensor::randn(ex.percep.shape(), 1.0, &mut rng);
            let zr = noise_forward(&ex.rgb, t, &er)?;
            let class = Some(ex.class);
            match model {
                Scored::Joint(m) => {
                    let zp = noise_forward(&ex.percep, t, &ep)?;
                    let (pr, pp) = m.predict(&zr, &zp, class, t)?;
                    rgb += mse(&pr, &er);
                    percep += mse(&pp, &ep);
                }
                Scored::RgbBranch(m) => {
                    rgb += mse(&RgbBranch(m).predict_noise(&zr, class, t)?, &er)
                }
                Scored::Single(m) => rgb += mse(&m.predict(&zr, class, t)?, &er),
            }
        }
    }
    let n = (data.len() * draws) as f64;
    let (rgb, percep) = (rgb / n, percep / n);
    Ok(match model {
        Scored::Joint(_) => ValLoss {
            joint: Some(0.5 * (rgb + percep)),
            rgb,
            percep: Some(percep),
        },
        _ => ValLoss {
            joint: None,
            rgb,
            percep: None,
        },
    })
}

/// A generated or reference clip with the class it was conditioned on.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub class: SceneClass,
    pub clip: VideoClip,
}

/// `per_class` clips for each class; sample `k` overall uses seed `seed + k`.
pub fn sample_set<F>(
    classes: &[SceneClass],
    per_class: usize,
    seed: u64,
    mut draw: F,
) -> Result<Vec<Labeled>>
where
    F: FnMut(SceneClass, u64) -> Result<VideoClip>,
{
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &class in classes {
        for _ in 0..per_class {
            let s = seed.wrapping_add(out.len() as u64);
            out.push(Labeled {
                class,
                clip: draw(class, s)?,
            });
        }
    }
    Ok(out)
}

pub fn sample_single<D: Denoiser + ?Sized>(
    model: &D,
    codec: &CodecConfig,
    shape: &[usize],
    cfg: &SamplerConfig,
    classes: &[SceneClass],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Labeled>> {
    sample_set(classes, per_class, seed, |c, s| {
        Ok(sample(model, codec, shape, Some(c.index()), cfg, s)?)
    })
}

/// RGB half of joint samples from a teacher.
pub fn sample_teacher_rgb(
    teacher: &Teacher,
    codec: &CodecConfig,
    shape: &[usize],
    cfg: &SamplerConfig,
    classes: &[SceneClass],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Labeled>> {
    sample_set(classes, per_class, seed, |c, s| {
        let (zr, _) = teacher.sample_joint(shape, Some(c.index()), cfg, s)?;
        Ok(decode_tensor(codec, zr)?.clamp01())
    })
}

/// Uniform noise clips, the floor of the proxy.
pub fn noise_set(
    classes: &[SceneClass],
    per_class: usize,
    frames: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Labeled>> {
    sample_set(classes, per_class, seed, |_, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        Ok(VideoClip::new(Tensor::from_fn(
            &[3, frames, size, size],
            |_| rng.random(),
        ))?)
    })
}

/// The camera every generated scene is rendered with.
pub fn world_camera(frames: usize, size: usize) -> Camera {
    SceneSpec::empty(0, frames, size, size).camera
}

pub fn score(samples: &[Labeled], camera: &Camera, cfg: &DetectorConfig) -> ToyPcReport {
    aggregate(
        samples
            .iter()
            .map(|s| evaluate_sample(&s.clip, s.class, camera, cfg))
            .collect(),
    )
}
