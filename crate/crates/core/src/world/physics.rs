//! Event-driven ballistic integration. Between events every body follows
//! exact constant-acceleration kinematics, so wall and ball contacts are
//! found by solving for the contact time instead of stepping.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyTrack, ObjectKind, SceneSpec};
use crate::{Error, Result};

const MAX_EVENTS_PER_FRAME: usize = 10_000;
const TIME_EPS: f64 = 1e-12;

/// Impact and motion counts gathered while simulating.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub ball_wall_impacts: usize,
    pub ball_pair_impacts: usize,
    /// Sum of restitution over ball impacts.
    pub elastic_bounces: f64,
    pub ball_path: f64,
    /// Mean path length per fluid particle.
    pub fluid_path: f64,
    pub fluid_wall_impacts: usize,
}

/// A body on one ballistic segment starting at time `t0`.
#[derive(Clone, Debug)]
pub struct Body {
    pub object: usize,
    pub radius: f64,
    pub mass: f64,
    pub collides: bool,
    pub damping: f64,
    pub restitution: f64,
    pub t0: f64,
    pub p0: [f64; 3],
    pub v0: [f64; 3],
    pub acc: [f64; 3],
    pub resting: bool,
}

impl Body {
    pub fn position(&self, t: f64) -> [f64; 3] {
        let u = t - self.t0;
        core::array::from_fn(|k| self.p0[k] + self.v0[k] * u + 0.5 * self.acc[k] * u * u)
    }

    pub fn velocity(&self, t: f64) -> [f64; 3] {
        let u = t - self.t0;
        core::array::from_fn(|k| self.v0[k] + self.acc[k] * u)
    }

    fn rebase(&mut self, t: f64) {
        if t != self.t0 {
            self.p0 = self.position(t);
            self.v0 = self.velocity(t);
            self.t0 = t;
        }
    }
}

/// Per-body world-frame state at every frame.
#[derive(Clone, Debug)]
pub struct BodyStates {
    pub radii: Vec<f64>,
    pub objects: Vec<usize>,
    pub positions: Vec<Vec<[f64; 3]>>,
    pub velocities: Vec<Vec<[f64; 3]>>,
    pub stats: SimStats,
}

impl BodyStates {
    /// Kinetic plus potential energy at frame `f`, potential measured from
    /// each body's floor contact height.
    pub fn energy(&self, spec: &SceneSpec, f: usize) -> f64 {
        let mut e = 0.0;
        for ((r, p), v) in self.radii.iter().zip(&self.positions).zip(&self.velocities) {
            let m = r * r * r;
            let (p, v) = (p[f], v[f]);
            e += 0.5 * m * dot(v, v) + m * spec.gravity * (spec.box_extent - r - p[1]);
        }
        e
    }
}

enum Event {
    Wall { body: usize, axis: usize, sign: f64 },
    Pair { a: usize, b: usize },
}

pub struct Simulator<'a> {
    spec: &'a SceneSpec,
    pub bodies: Vec<Body>,
    gravity: [f64; 3],
    stats: SimStats,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a SceneSpec) -> Self {
        let gravity = [0.0, spec.gravity, 0.0];
        let mut bodies = Vec::new();
        for (i, o) in spec.objects.iter().enumerate() {
            match o.kind {
                ObjectKind::RigidBall => bodies.push(Body {
                    object: i,
                    radius: o.radius,
                    mass: o.radius * o.radius * o.radius,
                    collides: true,
                    damping: 1.0,
                    restitution: spec.restitution,
                    t0: 0.0,
                    p0: o.position,
                    v0: o.velocity,
                    acc: gravity,
                    resting: false,
                }),
                ObjectKind::ParticleFluid => {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64),
                    );
                    let r = spec.fluid.particle_radius;
                    for _ in 0..spec.fluid.particles {
                        // Uniform point in the spawn ball by rejection.
                        let off = loop {
                            let c: [f64; 3] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
                            if c[0] * c[0] + c[1] * c[1] + c[2] * c[2] <= 1.0 {
                                break c;
                            }
                        };
                        let jitter: [f64; 3] =
                            core::array::from_fn(|_| rng.random_range(-0.01..0.01));
                        bodies.push(Body {
                            object: i,
                            radius: r,
                            mass: r * r * r,
                            collides: false,
                            damping: spec.fluid.damping,
                            restitution: spec.fluid.restitution,
                            t0: 0.0,
                            p0: core::array::from_fn(|k| o.position[k] + o.radius * off[k]),
                            v0: core::array::from_fn(|k| o.velocity[k] + jitter[k]),
                            acc: gravity,
                            resting: false,
                        });
                    }
                }
            }
        }
        Self {
            spec,
            bodies,
            gravity,
            stats: SimStats::default(),
        }
    }

    fn limit(&self, body: usize) -> f64 {
        self.spec.box_extent - self.bodies[body].radius
    }

    fn rest_speed(&self) -> f64 {
        libm::sqrt(2.0 * self.spec.gravity.abs() * 1e-9).max(1e-12)
    }

    /// Simulates all frames, returning camera-frame tracks per body.
    pub fn run(self) -> Result<(Vec<BodyTrack>, SimStats)> {
        let cam = self.spec.camera;
        let states = self.states()?;
        let tracks = states
            .radii
            .iter()
            .zip(&states.objects)
            .zip(states.positions)
            .map(|((&radius, &object), ps)| BodyTrack {
                object,
                radius,
                centers: ps.into_iter().map(|p| cam.to_camera(p)).collect(),
            })
            .collect();
        Ok((tracks, states.stats))
    }

    /// World-frame positions and velocities of every body at every frame.
    pub fn states(mut self) -> Result<BodyStates> {
        let frames = self.spec.frames;
        let mut positions: Vec<Vec<[f64; 3]>> =
            self.bodies.iter().map(|b| alloc::vec![b.p0]).collect();
        let mut velocities: Vec<Vec<[f64; 3]>> =
            self.bodies.iter().map(|b| alloc::vec![b.v0]).collect();
        for s in 0..frames - 1 {
            self.advance(s as f64, s as f64 + 1.0)?;
            let end = s as f64 + 1.0;
            for (i, b) in self.bodies.iter_mut().enumerate() {
                if b.damping < 1.0 {
                    b.rebase(end);
                    for v in &mut b.v0 {
                        *v *= b.damping;
                    }
                }
                positions[i].push(b.position(end));
                velocities[i].push(b.velocity(end));
            }
        }
        let mut fluid_path = 0.0;
        let mut fluid_n = 0usize;
        for (b, ps) in self.bodies.iter().zip(&positions) {
            let len: f64 = ps.windows(2).map(|w| super::dist(w[0], w[1])).sum();
            if b.collides {
                self.stats.ball_path += len;
            } else {
                fluid_path += len;
                fluid_n += 1;
            }
        }
        if fluid_n > 0 {
            self.stats.fluid_path = fluid_path / fluid_n as f64;
        }
        Ok(BodyStates {
            radii: self.bodies.iter().map(|b| b.radius).collect(),
            objects: self.bodies.iter().map(|b| b.object).collect(),
            positions,
            velocities,
            stats: self.stats,
        })
    }

    fn advance(&mut self, mut t: f64, end: f64) -> Result<()> {
        for _ in 0..MAX_EVENTS_PER_FRAME {
            let Some((te, ev)) = self.next_event(t, end) else {
                return Ok(());
            };
            self.apply(te, ev);
            t = te;
        }
        Err(Error::Simulation(alloc::format!(
            "event limit exceeded before t = {}",
            end
        )))
    }

    fn next_event(&self, t: f64, end: f64) -> Option<(f64, Event)> {
        let mut best: Option<(f64, Event)> = None;
        let mut offer = |te: f64, ev: Event| {
            if best.as_ref().is_none_or(|(b, _)| te < *b) {
                best = Some((te, ev));
            }
        };
        for (i, b) in self.bodies.iter().enumerate() {
            let lim = self.limit(i);
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let (p, v, a) = (b.p0[axis], b.v0[axis], b.acc[axis]);
                    if let Some(u) = first_crossing(p, v, a, sign * lim, sign, t - b.t0, end - b.t0)
                    {
                        offer(
                            b.t0 + u,
                            Event::Wall {
                                body: i,
                                axis,
                                sign,
                            },
                        );
                    }
                }
            }
        }
        for i in 0..self.bodies.len() {
            if !self.bodies[i].collides {
                continue;
            }
            for j in i + 1..self.bodies.len() {
                if !self.bodies[j].collides {
                    continue;
                }
                if let Some(u) = self.pair_contact(i, j, t, end - t) {
                    offer(t + u, Event::Pair { a: i, b: j });
                }
            }
        }
        best
    }

    fn pair_contact(&self, i: usize, j: usize, t: f64, umax: f64) -> Option<f64> {
        let (a, b) = (&self.bodies[i], &self.bodies[j]);
        let (pa, pb, va, vb) = (a.position(t), b.position(t), a.velocity(t), b.velocity(t));
        let dp: [f64; 3] = core::array::from_fn(|k| pb[k] - pa[k]);
        let dv: [f64; 3] = core::array::from_fn(|k| vb[k] - va[k]);
        let da: [f64; 3] = core::array::from_fn(|k| b.acc[k] - a.acc[k]);
        let r = a.radius + b.radius;
        let gap = |u: f64| {
            let d: [f64; 3] = core::array::from_fn(|k| dp[k] + dv[k] * u + 0.5 * da[k] * u * u);
            dot(d, d) - r * r
        };
        let approach0 = dot(dp, dv) < 0.0;
        if gap(0.0) <= 0.0 {
            return approach0.then_some(0.0);
        }
        if da == [0.0; 3] {
            let qa = dot(dv, dv);
            let qb = 2.0 * dot(dp, dv);
            let qc = dot(dp, dp) - r * r;
            if qb >= 0.0 || qa == 0.0 {
                return None;
            }
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return None;
            }
            let u = 2.0 * qc / (-qb + libm::sqrt(disc));
            return (u <= umax).then_some(u.max(0.0));
        }
        // Relative acceleration makes the gap quartic: scan then bisect.
        const SAMPLES: usize = 64;
        let mut lo = 0.0;
        for k in 1..=SAMPLES {
            let hi = umax * k as f64 / SAMPLES as f64;
            if gap(hi) <= 0.0 {
                let (mut l, mut h) = (lo, hi);
                for _ in 0..100 {
                    let m = 0.5 * (l + h);
                    if gap(m) <= 0.0 {
                        h = m;
                    } else {
                        l = m;
                    }
                }
                return Some(h);
            }
            lo = hi;
        }
        None
    }

    fn apply(&mut self, te: f64, ev: Event) {
        match ev {
            Event::Wall { body, axis, sign } => {
                let lim = self.limit(body);
                let rest = self.rest_speed();
                let g = self.gravity[axis];
                let b = &mut self.bodies[body];
                b.rebase(te);
                b.p0[axis] = sign * lim;
                b.v0[axis] = -b.restitution * b.v0[axis];
                let floor = axis == 1 && sign * g > 0.0;
                if floor && b.v0[axis].abs() < rest {
                    b.v0[axis] = 0.0;
                    b.acc[axis] = 0.0;
                    b.resting = true;
                }
                if b.collides {
                    self.stats.ball_wall_impacts += 1;
                    self.stats.elastic_bounces += b.restitution;
                } else {
                    self.stats.fluid_wall_impacts += 1;
                }
            }
            Event::Pair { a, b } => {
                self.bodies[a].rebase(te);
                self.bodies[b].rebase(te);
                let (pa, pb) = (self.bodies[a].p0, self.bodies[b].p0);
                let d: [f64; 3] = core::array::from_fn(|k| pb[k] - pa[k]);
                let len = libm::sqrt(dot(d, d));
                if len == 0.0 {
                    return;
                }
                let n: [f64; 3] = core::array::from_fn(|k| d[k] / len);
                let (va, vb) = (self.bodies[a].v0, self.bodies[b].v0);
                let vn = dot(core::array::from_fn(|k| vb[k] - va[k]), n);
                if vn >= 0.0 {
                    return;
                }
                let e = self.spec.restitution;
                let (ma, mb) = (self.bodies[a].mass, self.bodies[b].mass);
                let j = -(1.0 + e) * vn / (1.0 / ma + 1.0 / mb);
                for k in 0..3 {
                    self.bodies[a].v0[k] -= j / ma * n[k];
                    self.bodies[b].v0[k] += j / mb * n[k];
                }
                for idx in [a, b] {
                    let gy = self.gravity[1];
                    let body = &mut self.bodies[idx];
                    if body.resting {
                        if body.v0[1] * gy < 0.0 {
                            body.resting = false;
                            body.acc[1] = gy;
                        } else {
                            body.v0[1] = 0.0;
                        }
                    }
                }
                self.stats.ball_pair_impacts += 1;
                self.stats.elastic_bounces += e;
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Earliest `u` in `[umin, umax]` where `p + v u + a u²/2` reaches
/// `target` while moving in direction `sign`.
fn first_crossing(
    p: f64,
    v: f64,
    a: f64,
    target: f64,
    sign: f64,
    umin: f64,
    umax: f64,
) -> Option<f64> {
    let x = |u: f64| p + v * u + 0.5 * a * u * u;
    let vel = |u: f64| v + a * u;
    if sign * (x(umin) - target) >= 0.0 && sign * vel(umin) > 0.0 {
        return Some(umin);
    }
    let c = p - target;
    let mut roots = [f64::NAN; 2];
    if a == 0.0 {
        if v != 0.0 {
            roots[0] = -c / v;
        }
    } else {
        let (qa, qb) = (0.5 * a, v);
        let disc = qb * qb - 4.0 * qa * c;
        if disc < 0.0 {
            return None;
        }
        let sq = libm::sqrt(disc);
        let q = -0.5 * (qb + if qb >= 0.0 { sq } else { -sq });
        roots[0] = q / qa;
        if q != 0.0 {
            roots[1] = c / q;
        }
    }
    let mut best: Option<f64> = None;
    for u in roots {
        if u.is_finite() && u >= umin - TIME_EPS && u <= umax && sign * vel(u) > 0.0 {
            let u = u.max(umin);
            if best.is_none_or(|b| u < b) {
                best = Some(u);
            }
        }
    }
    best
}
