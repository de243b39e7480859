//! Deterministic reverse sampler for the forward process
//! `z_t = z_0 + t·ε`.
//!
//! Given a noise estimate `ε̂` at time `t`, the clean latent estimate is
//! `ẑ_0 = z_t − t·ε̂`. Re-noising that estimate to an earlier time `s` with
//! the same `ε̂` gives the update `z_s = ẑ_0 + s·ε̂`, which is exact whenever
//! `ε̂` is, and reduces to `ẑ_0` at `s = 0`. Sampling starts from
//! `z_1 ~ N(0, I)`, the forward marginal at `t = 1` for a centred latent.

use serde::{Deserialize, Serialize};

use crate::codec::{decode_tensor, CodecConfig};
use crate::dit::{seeded_noise, SingleStream};
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::{Error, Result};

pub trait Denoiser {
    /// Noise estimate with the latent's shape.
    fn predict_noise(&self, z_t: &Tensor, class: Option<usize>, t: f64) -> Result<Tensor>;
}

impl Denoiser for SingleStream {
    fn predict_noise(&self, z_t: &Tensor, class: Option<usize>, t: f64) -> Result<Tensor> {
        self.predict(z_t, class, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Classifier-free guidance weight; 1 disables guidance.
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
        }
    }
}

pub fn sample_latent<D: Denoiser + ?Sized>(
    model: &D,
    shape: &[usize],
    class: Option<usize>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let n = cfg.steps;
    let mut z = seeded_noise(shape, seed);
    for k in (1..=n).rev() {
        let t = k as f64 / n as f64;
        let s = (k - 1) as f64 / n as f64;
        let mut eps = model.predict_noise(&z, class, t)?;
        if cfg.guidance != 1.0 && class.is_some() {
            let uncond = model.predict_noise(&z, None, t)?;
            eps = uncond.zip_map(&eps, |u, c| u + cfg.guidance * (c - u));
        }
        let z0 = z.zip_map(&eps, |zv, e| zv - t * e);
        z = if k == 1 {
            z0
        } else {
            z0.zip_map(&eps, |a, e| a + s * e)
        };
    }
    Ok(z)
}

/// Samples a latent and decodes it to a clip clipped to `[0, 1]`.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    codec: &CodecConfig,
    latent_shape: &[usize],
    class: Option<usize>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<VideoClip> {
    let z = sample_latent(model, latent_shape, class, cfg, seed)?;
    Ok(decode_tensor(codec, z)?.clamp01())
}
