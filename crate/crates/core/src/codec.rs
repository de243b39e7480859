//! Invertible latent codec: time/space-to-depth rearrangement followed by a
//! fixed affine map. Stands in for a learned video VAE while keeping the
//! `[c, f, h, w]` latent contract.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Frames folded into channels.
    pub temporal: usize,
    /// Pixels per side folded into channels.
    pub spatial: usize,
    /// Subtracted before scaling.
    pub shift: f64,
    pub scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            temporal: 2,
            spatial: 2,
            shift: 0.5,
            scale: 2.0,
        }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.temporal * self.spatial * self.spatial
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal == 0 || self.spatial == 0 {
            return Err(Error::Config("codec factors must be positive".into()));
        }
        if !(self.scale.is_finite() && self.scale != 0.0 && self.shift.is_finite()) {
            return Err(Error::Config(
                "codec affine must be finite with nonzero scale".into(),
            ));
        }
        Ok(())
    }

    /// Latent shape for a `[3, frames, height, width]` clip.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        self.validate()?;
        for (axis, size, factor) in [
            ("frame", frames, self.temporal),
            ("height", height, self.spatial),
            ("width", width, self.spatial),
        ] {
            if size % factor != 0 || size == 0 {
                return Err(Error::Indivisible { axis, size, factor });
            }
        }
        Ok([
            self.latent_channels(),
            frames / self.temporal,
            height / self.spatial,
            width / self.spatial,
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock {
    data: Tensor,
    config: CodecConfig,
}

impl LatentBlock {
    pub fn new(data: Tensor, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let s = data.shape();
        if s.len() != 4 || s[0] != config.latent_channels() {
            return Err(Error::Shape(alloc::format!(
                "latent {:?} does not match codec with {} channels",
                s,
                config.latent_channels()
            )));
        }
        Ok(Self { data, config })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

pub fn encode(cfg: &CodecConfig, clip: &VideoClip) -> Result<LatentBlock> {
    let [_, frames, height, width] = clip.shape();
    let [c, f, h, w] = cfg.latent_shape(frames, height, width)?;
    let (tf, sf) = (cfg.temporal, cfg.spatial);
    let src = clip.tensor().data();
    let mut out = alloc::vec![0.0; c * f * h * w];
    for ch in 0..3 {
        for fi in 0..f {
            for dt in 0..tf {
                for yi in 0..h {
                    for dy in 0..sf {
                        for xi in 0..w {
                            for dx in 0..sf {
                                let co = ((ch * tf + dt) * sf + dy) * sf + dx;
                                let si = ((ch * frames + fi * tf + dt) * height + yi * sf + dy)
                                    * width
                                    + xi * sf
                                    + dx;
                                out[((co * f + fi) * h + yi) * w + xi] =
                                    (src[si] - cfg.shift) * cfg.scale;
                            }
                        }
                    }
                }
            }
        }
    }
    LatentBlock::new(Tensor::new(&[c, f, h, w], out), *cfg)
}

pub fn decode(latent: &LatentBlock) -> Result<VideoClip> {
    let cfg = latent.config;
    let [c, f, h, w] = latent.shape();
    if c != cfg.latent_channels() {
        return Err(Error::Shape(alloc::format!(
            "latent has {} channels, codec expects {}",
            c,
            cfg.latent_channels()
        )));
    }
    let (tf, sf) = (cfg.temporal, cfg.spatial);
    let (frames, height, width) = (f * tf, h * sf, w * sf);
    let src = latent.data.data();
    let mut out = alloc::vec![0.0; 3 * frames * height * width];
    for ch in 0..3 {
        for fi in 0..f {
            for dt in 0..tf {
                for yi in 0..h {
                    for dy in 0..sf {
                        for xi in 0..w {
                            for dx in 0..sf {
                                let co = ((ch * tf + dt) * sf + dy) * sf + dx;
                                let si = ((ch * frames + fi * tf + dt) * height + yi * sf + dy)
                                    * width
                                    + xi * sf
                                    + dx;
                                out[si] =
                                    src[((co * f + fi) * h + yi) * w + xi] / cfg.scale + cfg.shift;
                            }
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(Tensor::new(&[3, frames, height, width], out))
}

/// Decodes a raw latent tensor with `cfg`.
pub fn decode_tensor(cfg: &CodecConfig, latent: Tensor) -> Result<VideoClip> {
    decode(&LatentBlock::new(latent, *cfg)?)
}
