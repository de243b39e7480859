//! Procedural physics clips: elastic balls and damped particle puddles in a
//! closed box, filmed by a fixed pinhole camera, with exact masks,
//! pointmaps and body trajectories.

mod labels;
mod physics;
mod render;

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::NUM_PRIMITIVES;
use crate::tensor::Tensor;
use crate::video::VideoClip;
use crate::{Error, Result};

pub use labels::{clip_id, intensity, physics_labels, score_record_from_truth, vqa_from_masks};
pub use physics::{Body, BodyStates, SimStats, Simulator};
pub use render::{ball_color, object_colors, render_frame, Frame, FLUID_COLOR, PALETTE};

/// Scene classes double as the conditioning vocabulary of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneClass {
    OneBall,
    TwoBalls,
    ThreeBalls,
    Fluid,
    BallAndFluid,
}

impl SceneClass {
    pub const COUNT: usize = 5;
    pub const ALL: [SceneClass; 5] = [
        SceneClass::OneBall,
        SceneClass::TwoBalls,
        SceneClass::ThreeBalls,
        SceneClass::Fluid,
        SceneClass::BallAndFluid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::OneBall => "one_ball",
            SceneClass::TwoBalls => "two_balls",
            SceneClass::ThreeBalls => "three_balls",
            SceneClass::Fluid => "fluid",
            SceneClass::BallAndFluid => "ball_and_fluid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Distinct coloured objects visible in a clip of this class.
    pub fn object_count(self) -> usize {
        match self {
            SceneClass::OneBall | SceneClass::Fluid => 1,
            SceneClass::TwoBalls | SceneClass::BallAndFluid => 2,
            SceneClass::ThreeBalls => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    RigidBall,
    ParticleFluid,
}

/// One object. For a fluid, `radius` is the radius of the spawn cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub radius: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

impl ObjectSpec {
    pub fn ball(radius: f64, position: [f64; 3], velocity: [f64; 3]) -> Self {
        Self {
            kind: ObjectKind::RigidBall,
            radius,
            position,
            velocity,
        }
    }

    pub fn fluid(radius: f64, position: [f64; 3], velocity: [f64; 3]) -> Self {
        Self {
            kind: ObjectKind::ParticleFluid,
            radius,
            position,
            velocity,
        }
    }
}

/// Pinhole camera with identity rotation; camera coordinates are world
/// coordinates plus `translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub translation: [f64; 3],
}

impl Camera {
    /// Camera at `(0, 0, -distance)` framing a box of half-extent `extent`.
    pub fn framing(width: usize, height: usize, extent: f64, distance: f64) -> Self {
        let near = (distance - extent) / extent;
        Self {
            fx: 0.43 * width as f64 * near,
            fy: 0.43 * height as f64 * near,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            translation: [0.0, 0.0, distance],
        }
    }

    pub fn to_camera(&self, world: [f64; 3]) -> [f64; 3] {
        [
            world[0] + self.translation[0],
            world[1] + self.translation[1],
            world[2] + self.translation[2],
        ]
    }

    /// Pixel coordinates of a camera-frame point, `None` if `z <= 0`.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| {
            (
                self.fx * p[0] / p[2] + self.cx,
                self.fy * p[1] / p[2] + self.cy,
            )
        })
    }

    /// Unnormalised ray direction through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.translation[2] > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidParams {
    pub particles: usize,
    pub particle_radius: f64,
    /// Per-frame velocity multiplier.
    pub damping: f64,
    pub restitution: f64,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self {
            particles: 24,
            particle_radius: 0.07,
            damping: 0.85,
            restitution: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub class: Option<SceneClass>,
    pub objects: Vec<ObjectSpec>,
    /// Acceleration along `+y` (image down), units per frame squared.
    pub gravity: f64,
    pub restitution: f64,
    /// Half-extent of the box `[-B, B]^3`.
    pub box_extent: f64,
    pub camera: Camera,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub fluid: FluidParams,
}

pub const DEFAULT_EXTENT: f64 = 1.0;
pub const DEFAULT_DISTANCE: f64 = 3.5;

impl SceneSpec {
    /// Empty scene with the default box and camera.
    pub fn empty(seed: u64, frames: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            class: None,
            objects: Vec::new(),
            gravity: 0.004,
            restitution: 0.9,
            box_extent: DEFAULT_EXTENT,
            camera: Camera::framing(width, height, DEFAULT_EXTENT, DEFAULT_DISTANCE),
            frames,
            height,
            width,
            fluid: FluidParams::default(),
        }
    }

    /// A random valid scene of the given class.
    pub fn random(
        class: SceneClass,
        seed: u64,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let mut spec = Self::empty(seed, frames, height, width);
        spec.class = Some(class);
        spec.gravity = rng.random_range(0.002..0.006);
        spec.restitution = rng.random_range(0.75..1.0);
        let kinds: &[ObjectKind] = match class {
            SceneClass::OneBall => &[ObjectKind::RigidBall],
            SceneClass::TwoBalls => &[ObjectKind::RigidBall; 2],
            SceneClass::ThreeBalls => &[ObjectKind::RigidBall; 3],
            SceneClass::Fluid => &[ObjectKind::ParticleFluid],
            SceneClass::BallAndFluid => &[ObjectKind::RigidBall, ObjectKind::ParticleFluid],
        };
        let b = spec.box_extent;
        let pr = spec.fluid.particle_radius;
        for &kind in kinds {
            for _attempt in 0..1000 {
                let (radius, reach) = match kind {
                    ObjectKind::RigidBall => {
                        let r = rng.random_range(0.16..0.26);
                        (r, r)
                    }
                    ObjectKind::ParticleFluid => {
                        let r = rng.random_range(0.15..0.25);
                        (r, r + pr)
                    }
                };
                let lim = b - reach - 0.02;
                let position = [
                    rng.random_range(-lim..lim),
                    rng.random_range(-lim..lim * 0.2),
                    rng.random_range(-lim * 0.6..lim * 0.6),
                ];
                let vmax = 0.06;
                let velocity = [
                    rng.random_range(-vmax..vmax),
                    rng.random_range(-vmax..vmax * 0.3),
                    rng.random_range(-0.02..0.02),
                ];
                let candidate = ObjectSpec {
                    kind,
                    radius,
                    position,
                    velocity,
                };
                if spec
                    .objects
                    .iter()
                    .all(|o| dist(o.position, position) > reach_of(o, pr) + reach + 0.02)
                {
                    spec.objects.push(candidate);
                    break;
                }
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.frames < 2 {
            return bad(alloc::format!(
                "need at least 2 frames, got {}",
                self.frames
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.objects.is_empty() {
            return bad("scene has no objects".into());
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return bad(alloc::format!(
                "restitution {} outside [0, 1]",
                self.restitution
            ));
        }
        if !(self.box_extent > 0.0) || !self.gravity.is_finite() {
            return bad("box extent must be positive and gravity finite".into());
        }
        if !self.camera.is_valid() || self.camera.translation[2] <= self.box_extent {
            return bad("camera must sit outside the box in front of it".into());
        }
        let f = &self.fluid;
        if !(f.particle_radius > 0.0)
            || !(0.0..=1.0).contains(&f.damping)
            || !(0.0..=1.0).contains(&f.restitution)
        {
            return bad("fluid parameters out of range".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.radius > 0.0) {
                return bad(alloc::format!("object {} has non-positive radius", i));
            }
            if o.kind == ObjectKind::ParticleFluid && f.particles == 0 {
                return bad("fluid needs particles".into());
            }
            let reach = reach_of(o, f.particle_radius);
            if o.position.iter().any(|c| c.abs() + reach > self.box_extent) {
                return bad(alloc::format!("object {} starts outside the box", i));
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let (a, b) = (&self.objects[i], &self.objects[j]);
                if dist(a.position, b.position)
                    < reach_of(a, f.particle_radius) + reach_of(b, f.particle_radius)
                {
                    return Err(Error::Overlap(i, j));
                }
            }
        }
        Ok(())
    }
}

fn reach_of(o: &ObjectSpec, particle_radius: f64) -> f64 {
    match o.kind {
        ObjectKind::RigidBall => o.radius,
        ObjectKind::ParticleFluid => o.radius + particle_radius,
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
}

/// Camera-frame trajectory of one simulated body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyTrack {
    /// Index into `SceneSpec::objects`.
    pub object: usize,
    pub radius: f64,
    pub centers: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[F, H, W]`, 0 is background, `k + 1` is object `k`.
    pub masks: Vec<u16>,
    /// Camera-frame XYZ, `[3, F, H, W]`.
    pub pointmap: Tensor,
    pub tracks: Vec<BodyTrack>,
    pub physics_labels: [f64; NUM_PRIMITIVES],
    pub stats: SimStats,
}

impl SceneTruth {
    pub fn mask(&self, f: usize, y: usize, x: usize) -> u16 {
        self.masks[(f * self.height + y) * self.width + x]
    }

    pub fn point(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        let plane = self.frames * self.height * self.width;
        let i = (f * self.height + y) * self.width + x;
        let d = self.pointmap.data();
        [d[i], d[plane + i], d[2 * plane + i]]
    }

    /// Frame-`f` mask slice.
    pub fn frame_mask(&self, f: usize) -> &[u16] {
        let n = self.height * self.width;
        &self.masks[f * n..(f + 1) * n]
    }
}

/// Runs the simulation and renders it.
pub fn simulate(spec: &SceneSpec) -> Result<(VideoClip, SceneTruth)> {
    spec.validate()?;
    let (tracks, stats) = Simulator::new(spec).run()?;
    let (frames, h, w) = (spec.frames, spec.height, spec.width);
    let mut rgb = Tensor::zeros(&[3, frames, h, w]);
    let mut pointmap = Tensor::zeros(&[3, frames, h, w]);
    let mut masks = alloc::vec![0u16; frames * h * w];
    let plane = frames * h * w;
    for f in 0..frames {
        let frame = render_frame(spec, &tracks, f);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let i = (f * h + y) * w + x;
                masks[i] = frame.mask[p];
                for c in 0..3 {
                    rgb.data_mut()[c * plane + i] = frame.rgb[p][c];
                    pointmap.data_mut()[c * plane + i] = frame.xyz[p][c];
                }
            }
        }
    }
    let physics_labels = physics_labels(&stats);
    let clip = VideoClip::new(rgb)?;
    Ok((
        clip,
        SceneTruth {
            frames,
            height: h,
            width: w,
            masks,
            pointmap,
            tracks,
            physics_labels,
            stats,
        },
    ))
}
