//! Pseudo-RGB perception video: pointmap colours, instance tint and
//! coloured 3D point tracks composited into one `[3, F, H, W]` clip.

use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::video::{LayerSet, PercepClip, VideoClip};
use crate::world::{Camera, SceneTruth};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PercepConfig {
    pub layers: LayerSet,
    pub n_points: usize,
    /// Disc radius in pixels at 64 px width; scaled with the frame width.
    pub radius: f64,
    pub tint_alpha: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for PercepConfig {
    fn default() -> Self {
        Self {
            layers: LayerSet::UNIFIED,
            n_points: 256,
            radius: 1.0,
            tint_alpha: 0.5,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl PercepConfig {
    pub fn disc_radius(&self, width: usize) -> f64 {
        self.radius * width as f64 / 64.0
    }
}

/// A frame-0 surface sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: usize,
    pub y: usize,
    pub label: u16,
    pub position: [f64; 3],
}

/// Uniform sample without replacement over masked pixels of frame 0 of
/// `masks` (`[H, W]` slice), lifted to 3D with `point_at`.
pub fn sample_points(
    masks: &[u16],
    width: usize,
    point_at: impl Fn(usize, usize) -> [f64; 3],
    n_points: usize,
    seed: u64,
) -> Result<Vec<SamplePoint>> {
    let pixels: Vec<usize> = (0..masks.len()).filter(|&i| masks[i] != 0).collect();
    if pixels.is_empty() {
        return Err(Error::NoPhysicalSubject);
    }
    let k = n_points.min(pixels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pixels.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|j| {
            let i = pixels[j];
            let (x, y) = (i % width, i / width);
            SamplePoint {
                x,
                y,
                label: masks[i],
                position: point_at(x, y),
            }
        })
        .collect())
}

/// Min-max normalised `(x, y, 1/z)` colours; a degenerate axis maps to 0.5.
pub fn assign_colors(points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if points.iter().any(|p| !(p[2] > 0.0)) {
        return Err(Error::Shape("point colours need z > 0".into()));
    }
    let feats: Vec<[f64; 3]> = points.iter().map(|p| [p[0], p[1], 1.0 / p[2]]).collect();
    let basis = ColorBasis::fit(feats.iter().copied());
    Ok(feats.iter().map(|f| basis.apply_features(*f)).collect())
}

/// Per-axis min-max normaliser over `(x, y, 1/z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorBasis {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ColorBasis {
    pub fn fit(feats: impl IntoIterator<Item = [f64; 3]>) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for f in feats {
            for k in 0..3 {
                min[k] = min[k].min(f[k]);
                max[k] = max[k].max(f[k]);
            }
        }
        Self { min, max }
    }

    pub fn apply_features(&self, f: [f64; 3]) -> [f64; 3] {
        core::array::from_fn(|k| {
            let span = self.max[k] - self.min[k];
            if span > 0.0 {
                ((f[k] - self.min[k]) / span).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.apply_features([p[0], p[1], 1.0 / p[2]])
    }
}

/// A coloured point followed through every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrack {
    pub color: [f64; 3],
    pub positions: Vec<[f64; 3]>,
}

/// Follows frame-0 samples by attaching each to the nearest body surface of
/// its object and translating it with that body.
pub fn track_points(truth: &SceneTruth, points: &[SamplePoint]) -> Vec<Vec<[f64; 3]>> {
    points
        .iter()
        .map(|p| {
            let object = p.label as usize - 1;
            let body = truth
                .tracks
                .iter()
                .filter(|t| t.object == object)
                .min_by(|a, b| surface_gap(p.position, a).total_cmp(&surface_gap(p.position, b)))
                .expect("masked pixel without a body");
            let c0 = body.centers[0];
            body.centers
                .iter()
                .map(|c| core::array::from_fn(|k| p.position[k] + (c[k] - c0[k])))
                .collect()
        })
        .collect()
}

fn surface_gap(p: [f64; 3], body: &crate::world::BodyTrack) -> f64 {
    (crate::world::dist(p, body.centers[0]) - body.radius).abs()
}

/// Fixed tint per instance label, cycling through well-separated hues.
pub fn instance_hue(label: u16) -> [f64; 3] {
    const HUES: [[f64; 3]; 6] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.3, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
    ];
    HUES[(label as usize).saturating_sub(1) % HUES.len()]
}

/// Frame-wise composite plus, per pixel, the index of the track drawn last
/// there (if any).
#[derive(Clone, Debug, PartialEq)]
pub struct PercepRender {
    pub clip: PercepClip,
    pub owners: Vec<Option<u32>>,
    pub tracks: Vec<PointTrack>,
}

pub fn render_percep(
    tracks: &[PointTrack],
    truth: &SceneTruth,
    camera: &Camera,
    cfg: &PercepConfig,
) -> Result<PercepRender> {
    let (frames, h, w) = (truth.frames, truth.height, truth.width);
    let plane = frames * h * w;
    let mut px = Tensor::zeros(&[3, frames, h, w]);
    let mut owners = alloc::vec![None; plane];
    let basis = ColorBasis::fit((0..h * w).map(|i| {
        let p = truth.point(0, i / w, i % w);
        [p[0], p[1], 1.0 / p[2]]
    }));
    let r = cfg.disc_radius(w);
    let reach = libm::floor(r) as i64;
    for f in 0..frames {
        let mut frame = alloc::vec![cfg.background; h * w];
        if cfg.layers.pointmap {
            for (i, c) in frame.iter_mut().enumerate() {
                *c = basis.apply(truth.point(f, i / w, i % w));
            }
        }
        if cfg.layers.segmentation {
            let a = cfg.tint_alpha;
            for (i, c) in frame.iter_mut().enumerate() {
                let label = truth.frame_mask(f)[i];
                if label != 0 {
                    let hue = instance_hue(label);
                    *c = core::array::from_fn(|k| (1.0 - a) * c[k] + a * hue[k]);
                }
            }
        }
        if cfg.layers.tracks {
            let mut order: Vec<usize> = (0..tracks.len())
                .filter(|&k| tracks[k].positions[f][2] > 0.0)
                .collect();
            // Far to near, so nearer points end on top.
            order.sort_by(|&a, &b| tracks[b].positions[f][2].total_cmp(&tracks[a].positions[f][2]));
            for k in order {
                let Some((u, v)) = camera.project(tracks[k].positions[f]) else {
                    continue;
                };
                let (cu, cv) = (libm::round(u) as i64, libm::round(v) as i64);
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if ((dx * dx + dy * dy) as f64) > r * r {
                            continue;
                        }
                        let (x, y) = (cu + dx, cv + dy);
                        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                            continue;
                        }
                        let i = y as usize * w + x as usize;
                        frame[i] = tracks[k].color;
                        owners[f * h * w + i] = Some(k as u32);
                    }
                }
            }
        }
        for (i, c) in frame.iter().enumerate() {
            for ch in 0..3 {
                px.data_mut()[ch * plane + f * h * w + i] = c[ch];
            }
        }
    }
    let video = VideoClip::new(px)?;
    Ok(PercepRender {
        clip: PercepClip {
            video,
            layers: cfg.layers,
            n_points: tracks.len(),
        },
        owners,
        tracks: tracks.to_vec(),
    })
}

/// Samples, colours, tracks and renders in one go.
pub fn encode_percep(
    truth: &SceneTruth,
    camera: &Camera,
    cfg: &PercepConfig,
) -> Result<PercepRender> {
    let (w, h) = (truth.width, truth.height);
    let points = sample_points(
        &truth.masks[..w * h],
        w,
        |x, y| truth.point(0, y, x),
        cfg.n_points,
        cfg.seed,
    )?;
    let colors = assign_colors(&points.iter().map(|p| p.position).collect::<Vec<_>>())?;
    let tracks: Vec<PointTrack> = track_points(truth, &points)
        .into_iter()
        .zip(colors)
        .map(|(positions, color)| PointTrack { color, positions })
        .collect();
    render_percep(&tracks, truth, camera, cfg)
}
