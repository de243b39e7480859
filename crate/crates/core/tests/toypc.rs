use physjoint_core::tensor::Tensor;
use physjoint_core::toypc::{aggregate, evaluate_sample, DetectorConfig};
use physjoint_core::video::VideoClip;
use physjoint_core::world::{simulate, SceneClass, SceneSpec};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn simulator_clips_are_physical() {
    let cfg = DetectorConfig::default();
    for &size in &[16usize, 32, 64] {
        let mut reports = Vec::new();
        for seed in 0..40u64 {
            let class = SceneClass::ALL[seed as usize % 5];
            let spec = SceneSpec::random(class, seed, 16, size, size);
            let (clip, _) = simulate(&spec).unwrap();
            reports.push(evaluate_sample(&clip, class, &spec.camera, &cfg));
        }
        let r = aggregate(reports);
        assert!(r.mean.penetration_rate <= 0.01, "{size}: {:?}", r.mean);
        // At 16 px one object can hide another completely for a few frames.
        let stability = if size < 32 { 0.95 } else { 0.99 };
        assert!(r.mean.count_stability >= stability, "{size}: {:?}", r.mean);
        assert!(r.mean.smoothness >= 0.0);
    }
}

#[test]
fn noise_clips_have_no_stable_count() {
    let cfg = DetectorConfig::default();
    for &size in &[16usize, 32] {
        let spec = SceneSpec::random(SceneClass::OneBall, 0, 8, size, size);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = VideoClip::new(Tensor::from_fn(&[3, 8, size, size], |_| rng.random())).unwrap();
        let r = evaluate_sample(&clip, SceneClass::OneBall, &spec.camera, &cfg);
        assert!(r.count_stability <= 0.05, "{size}: {r:?}");
        assert!(r.penetration_rate >= 0.95, "{size}: {r:?}");
    }
}
