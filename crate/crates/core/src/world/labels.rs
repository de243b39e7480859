//! Simulator-derived stand-ins for per-clip quality and physics scores.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ObjectKind, SceneSpec, SceneTruth, SimStats};
use crate::curation::{ScoreRecord, NUM_PRIMITIVES};

/// Maps a non-negative amount monotonically onto `[1, 5)`.
pub fn intensity(amount: f64, scale: f64) -> f64 {
    1.0 + 4.0 * (1.0 - libm::exp(-amount.max(0.0) / scale))
}

pub fn physics_labels(stats: &SimStats) -> [f64; NUM_PRIMITIVES] {
    let mut s = [1.0; NUM_PRIMITIVES];
    s[0] = intensity(stats.ball_path, 0.3);
    s[1] = intensity(
        2.0 * stats.ball_pair_impacts as f64 + stats.ball_wall_impacts as f64,
        1.5,
    );
    s[2] = intensity(stats.fluid_path, 0.2);
    s[4] = intensity(stats.elastic_bounces, 2.0);
    s
}

/// Quality score from how much of the frame changes label between frames.
pub fn vqa_from_masks(truth: &SceneTruth) -> f64 {
    let n = truth.height * truth.width;
    let mut changed = 0usize;
    for f in 1..truth.frames {
        let (a, b) = (truth.frame_mask(f - 1), truth.frame_mask(f));
        changed += a.iter().zip(b).filter(|(x, y)| x != y).count();
    }
    let rate = changed as f64 / ((truth.frames - 1) * n) as f64;
    intensity(rate, 0.003)
}

pub fn clip_id(seed: u64) -> String {
    format!("clip-{:08}", seed)
}

pub fn score_record_from_truth(truth: &SceneTruth, spec: &SceneSpec) -> ScoreRecord {
    let mut balls = 0;
    let subject_phrases: Vec<String> = spec
        .objects
        .iter()
        .map(|o| match o.kind {
            ObjectKind::RigidBall => {
                balls += 1;
                format!("ball {}", balls)
            }
            ObjectKind::ParticleFluid => "liquid".into(),
        })
        .collect();
    ScoreRecord {
        video_id: clip_id(spec.seed),
        vqa: vqa_from_masks(truth),
        reality: 5,
        scores: truth.physics_labels.to_vec(),
        subject_phrases,
    }
}
