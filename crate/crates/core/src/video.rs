//! Pixel-space clips, `[3, F, H, W]` with values in `[0, 1]`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pixels: Tensor,
}

impl VideoClip {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(alloc::format!(
                "video must be [3, F, H, W], got {:?}",
                s
            )));
        }
        Ok(Self { pixels })
    }

    pub fn filled(frames: usize, height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = frames * height * width;
        let pixels = Tensor::from_fn(&[3, frames, height, width], |i| rgb[i / plane]);
        Self { pixels }
    }

    pub fn frames(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(3)
    }

    pub fn shape(&self) -> [usize; 4] {
        [3, self.frames(), self.height(), self.width()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    #[inline]
    fn index(&self, c: usize, f: usize, y: usize, x: usize) -> usize {
        ((c * self.frames() + f) * self.height() + y) * self.width() + x
    }

    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[self.index(c, f, y, x)]
    }

    pub fn rgb(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        [
            self.get(0, f, y, x),
            self.get(1, f, y, x),
            self.get(2, f, y, x),
        ]
    }

    pub fn set_rgb(&mut self, f: usize, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            let i = self.index(c, f, y, x);
            self.pixels.data_mut()[i] = v;
        }
    }

    /// Copy of one frame as `[3, H, W]`.
    pub fn frame(&self, f: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let start = self.index(c, f, 0, 0);
            data.extend_from_slice(&self.pixels.data()[start..start + h * w]);
        }
        Tensor::new(&[3, h, w], data)
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.pixels.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Mean absolute change between consecutive frames.
    pub fn mean_frame_change(&self) -> f64 {
        let f = self.frames();
        if f < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for c in 0..3 {
            for fi in 1..f {
                for y in 0..self.height() {
                    for x in 0..self.width() {
                        total += libm::fabs(self.get(c, fi, y, x) - self.get(c, fi - 1, y, x));
                    }
                }
            }
        }
        total / (3 * (f - 1) * self.height() * self.width()) as f64
    }
}

/// Which perception layers were composited into a pseudo-RGB clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet {
    pub pointmap: bool,
    pub segmentation: bool,
    pub tracks: bool,
}

impl LayerSet {
    pub const UNIFIED: LayerSet = LayerSet {
        pointmap: true,
        segmentation: true,
        tracks: true,
    };
    pub const SEGMENTATION: LayerSet = LayerSet {
        pointmap: false,
        segmentation: true,
        tracks: false,
    };
    pub const POINTMAP: LayerSet = LayerSet {
        pointmap: true,
        segmentation: false,
        tracks: false,
    };
    pub const TRACKS: LayerSet = LayerSet {
        pointmap: false,
        segmentation: false,
        tracks: true,
    };

    /// Parses a comma list such as `seg,xyz,tracks` (or `unified`).
    pub fn parse(s: &str) -> Option<LayerSet> {
        let mut out = LayerSet {
            pointmap: false,
            segmentation: false,
            tracks: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "seg" | "segmentation" => out.segmentation = true,
                "xyz" | "pointmap" => out.pointmap = true,
                "tracks" | "track" => out.tracks = true,
                "unified" | "all" => out = LayerSet::UNIFIED,
                _ => return None,
            }
        }
        Some(out)
    }
}

impl Default for LayerSet {
    fn default() -> Self {
        LayerSet::UNIFIED
    }
}

/// A pseudo-RGB perception video paired with an RGB clip of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PercepClip {
    pub video: VideoClip,
    pub layers: LayerSet,
    pub n_points: usize,
}
