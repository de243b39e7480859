//! Colour-blob physics proxy for generated clips: wall penetration, object
//! count stability and centroid smoothness.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::video::VideoClip;
use crate::world::{Camera, SceneClass, FLUID_COLOR, PALETTE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Minimum `max - min` over RGB for a pixel to count as coloured.
    pub chroma_min: f64,
    pub hue_tolerance_deg: f64,
    pub min_pixels: usize,
    /// Allowed overshoot past the box rectangle, in pixels.
    pub slack_px: f64,
    pub box_extent: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            chroma_min: 0.12,
            hue_tolerance_deg: 14.0,
            min_pixels: 1,
            slack_px: 0.25,
            box_extent: 1.0,
        }
    }
}

/// Reference hues: ball palette then fluid.
pub fn reference_colors() -> Vec<[f64; 3]> {
    let mut v = PALETTE.to_vec();
    v.push(FLUID_COLOR);
    v
}

pub fn hue_deg(c: [f64; 3]) -> Option<f64> {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == c[0] {
        60.0 * libm::fmod((c[1] - c[2]) / d + 6.0, 6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    Some(h)
}

fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub hue: usize,
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

pub fn detect(clip: &VideoClip, f: usize, cfg: &DetectorConfig) -> Vec<Blob> {
    let refs: Vec<f64> = reference_colors()
        .into_iter()
        .map(|c| hue_deg(c).unwrap())
        .collect();
    let mut pixels: Vec<Vec<(usize, usize)>> = alloc::vec![Vec::new(); refs.len()];
    for y in 0..clip.height() {
        for x in 0..clip.width() {
            let c = clip.rgb(f, y, x);
            let chroma = c[0].max(c[1]).max(c[2]) - c[0].min(c[1]).min(c[2]);
            if chroma < cfg.chroma_min {
                continue;
            }
            let Some(h) = hue_deg(c) else { continue };
            let best = (0..refs.len())
                .min_by(|&a, &b| hue_gap(h, refs[a]).total_cmp(&hue_gap(h, refs[b])))
                .unwrap();
            if hue_gap(h, refs[best]) <= cfg.hue_tolerance_deg {
                pixels[best].push((x, y));
            }
        }
    }
    pixels
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.len() >= cfg.min_pixels.max(1))
        .map(|(hue, pixels)| {
            let n = pixels.len() as f64;
            let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            Blob {
                hue,
                pixels,
                centroid: (cx, cy),
            }
        })
        .collect()
}

/// Pixel rectangle covered by the box's front face.
pub fn box_rect(camera: &Camera, extent: f64) -> [f64; 4] {
    let z = camera.translation[2] - extent;
    let (x0, y0) = (camera.translation[0], camera.translation[1]);
    [
        camera.fx * (x0 - extent) / z + camera.cx,
        camera.fy * (y0 - extent) / z + camera.cy,
        camera.fx * (x0 + extent) / z + camera.cx,
        camera.fy * (y0 + extent) / z + camera.cy,
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub penetration_rate: f64,
    pub count_stability: f64,
    pub smoothness: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyPcReport {
    pub samples: Vec<SampleReport>,
    pub mean: SampleReport,
}

pub fn evaluate_sample(
    clip: &VideoClip,
    class: SceneClass,
    camera: &Camera,
    cfg: &DetectorConfig,
) -> SampleReport {
    let rect = box_rect(camera, cfg.box_extent);
    let s = cfg.slack_px;
    let frames = clip.frames();
    let mut penetrating = 0usize;
    let mut stable = 0usize;
    let mut tracks: Vec<Vec<Option<(f64, f64)>>> =
        alloc::vec![alloc::vec![None; frames]; reference_colors().len()];
    for f in 0..frames {
        let blobs = detect(clip, f, cfg);
        let outside = blobs.iter().any(|b| {
            b.pixels.iter().any(|&(x, y)| {
                let (x, y) = (x as f64, y as f64);
                x < rect[0] - s || y < rect[1] - s || x > rect[2] + s || y > rect[3] + s
            })
        });
        penetrating += outside as usize;
        stable += (blobs.len() == class.object_count()) as usize;
        for b in blobs {
            tracks[b.hue][f] = Some(b.centroid);
        }
    }
    let mut second = 0.0;
    let mut n = 0usize;
    for t in &tracks {
        for f in 1..frames.saturating_sub(1) {
            if let (Some(a), Some(b), Some(c)) = (t[f - 1], t[f], t[f + 1]) {
                let (dx, dy) = (c.0 - 2.0 * b.0 + a.0, c.1 - 2.0 * b.1 + a.1);
                second += libm::sqrt(dx * dx + dy * dy);
                n += 1;
            }
        }
    }
    SampleReport {
        penetration_rate: penetrating as f64 / frames as f64,
        count_stability: stable as f64 / frames as f64,
        smoothness: if n > 0 { second / n as f64 } else { 0.0 },
    }
}

pub fn aggregate(samples: Vec<SampleReport>) -> ToyPcReport {
    let n = samples.len().max(1) as f64;
    let mean = SampleReport {
        penetration_rate: samples.iter().map(|s| s.penetration_rate).sum::<f64>() / n,
        count_stability: samples.iter().map(|s| s.count_stability).sum::<f64>() / n,
        smoothness: samples.iter().map(|s| s.smoothness).sum::<f64>() / n,
    };
    ToyPcReport { samples, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_hues_are_distinct() {
        let h: Vec<f64> = reference_colors()
            .into_iter()
            .map(|c| hue_deg(c).unwrap())
            .collect();
        for i in 0..h.len() {
            for j in i + 1..h.len() {
                assert!(hue_gap(h[i], h[j]) > 2.0 * DetectorConfig::default().hue_tolerance_deg);
            }
        }
        assert_eq!(hue_deg([0.5, 0.5, 0.5]), None);
    }
}
