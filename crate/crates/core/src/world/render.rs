//! Ray-cast renderer: shaded spheres inside a grey box with an open front
//! face, over a dark backdrop.

use alloc::vec::Vec;

use super::{BodyTrack, ObjectKind, SceneSpec};

/// Ball colours by ball ordinal: red, green, magenta, orange.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.92, 0.12, 0.10],
    [0.12, 0.82, 0.16],
    [0.85, 0.15, 0.85],
    [0.95, 0.55, 0.05],
];
pub const FLUID_COLOR: [f64; 3] = [0.12, 0.30, 0.95];
const BACKDROP: f64 = 0.12;
const AMBIENT: f64 = 0.35;

pub fn ball_color(ordinal: usize) -> [f64; 3] {
    PALETTE[ordinal % PALETTE.len()]
}

/// Base colour of every object in `spec`.
pub fn object_colors(spec: &SceneSpec) -> Vec<[f64; 3]> {
    let mut balls = 0;
    spec.objects
        .iter()
        .map(|o| match o.kind {
            ObjectKind::RigidBall => {
                balls += 1;
                ball_color(balls - 1)
            }
            ObjectKind::ParticleFluid => FLUID_COLOR,
        })
        .collect()
}

pub struct Frame {
    pub rgb: Vec<[f64; 3]>,
    pub xyz: Vec<[f64; 3]>,
    pub mask: Vec<u16>,
}

pub fn render_frame(spec: &SceneSpec, tracks: &[BodyTrack], f: usize) -> Frame {
    let (h, w) = (spec.height, spec.width);
    let cam = spec.camera;
    let colors = object_colors(spec);
    let light = normalize([-0.4, -0.7, -0.6]);
    let b = spec.box_extent;
    let t = cam.translation;
    let mut frame = Frame {
        rgb: alloc::vec![[0.0; 3]; h * w],
        xyz: alloc::vec![[0.0; 3]; h * w],
        mask: alloc::vec![0; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let d = cam.ray(x as f64, y as f64);
            let mut best: Option<(f64, usize)> = None;
            for (k, tr) in tracks.iter().enumerate() {
                if let Some(s) = hit_sphere(d, tr.centers[f], tr.radius) {
                    if best.is_none_or(|(bs, _)| s < bs) {
                        best = Some((s, k));
                    }
                }
            }
            let p = y * w + x;
            if let Some((s, k)) = best {
                let tr = &tracks[k];
                let hit = [s * d[0], s * d[1], s * d[2]];
                let c = tr.centers[f];
                let n = [
                    (hit[0] - c[0]) / tr.radius,
                    (hit[1] - c[1]) / tr.radius,
                    (hit[2] - c[2]) / tr.radius,
                ];
                let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                let base = colors[tr.object];
                frame.rgb[p] = [base[0] * shade, base[1] * shade, base[2] * shade];
                frame.xyz[p] = hit;
                frame.mask[p] = tr.object as u16 + 1;
                continue;
            }
            let (s, grey) = background(d, t, b);
            frame.rgb[p] = [grey; 3];
            frame.xyz[p] = [s * d[0], s * d[1], s * d[2]];
        }
    }
    frame
}

/// Ray parameter and grey level of the box interior or backdrop seen
/// along `d` (with `d[2] == 1`).
fn background(d: [f64; 3], t: [f64; 3], b: f64) -> (f64, f64) {
    let front = t[2] - b;
    let back = t[2] + b;
    let inside = |s: f64| (s * d[0] - t[0]).abs() <= b && (s * d[1] - t[1]).abs() <= b;
    if !inside(front) {
        return (back, BACKDROP);
    }
    let mut best = (back, 0.6);
    let planes = [(d[0], t[0], 0.5, 0.7), (d[1], t[1], 0.75, 0.45)];
    for (dk, tk, low_grey, high_grey) in planes {
        if dk > 0.0 {
            let s = (tk + b) / dk;
            if s < best.0 {
                best = (s, high_grey);
            }
        } else if dk < 0.0 {
            let s = (tk - b) / dk;
            if s < best.0 {
                best = (s, low_grey);
            }
        }
    }
    best
}

/// Nearest positive ray parameter where `s·d` meets the sphere.
fn hit_sphere(d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let hb = d[0] * c[0] + d[1] * c[1] + d[2] * c[2];
    let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - r * r;
    let disc = hb * hb - a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = (hb - libm::sqrt(disc)) / a;
    (s > 0.0).then_some(s)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    [v[0] / n, v[1] / n, v[2] / n]
}
