use physjoint_core::percep::{
    encode_percep, render_percep, sample_points, PercepConfig, PointTrack,
};
use physjoint_core::video::LayerSet;
use physjoint_core::world::{simulate, ObjectSpec, SceneClass, SceneSpec};
use proptest::prelude::*;

#[test]
fn colours_are_permanent_and_shapes_match() {
    for seed in 0..25u64 {
        let spec = SceneSpec::random(SceneClass::ALL[seed as usize % 5], seed, 8, 32, 32);
        let (rgb, truth) = simulate(&spec).unwrap();
        let cfg = PercepConfig {
            radius: 2.0,
            seed,
            ..Default::default()
        };
        let out = encode_percep(&truth, &spec.camera, &cfg).unwrap();
        let v = &out.clip.video;
        assert_eq!(v.shape(), rgb.shape());
        assert!(v.in_unit_range());
        let (h, w) = (32, 32);
        let mut seen = 0;
        for f in 0..8 {
            for y in 0..h {
                for x in 0..w {
                    if let Some(k) = out.owners[(f * h + y) * w + x] {
                        assert_eq!(v.rgb(f, y, x), out.tracks[k as usize].color);
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 0);
    }
}

#[test]
fn sampled_points_reproject_to_their_pixel() {
    for seed in 0..20u64 {
        let spec = SceneSpec::random(SceneClass::ALL[seed as usize % 5], seed, 4, 48, 48);
        let (_, truth) = simulate(&spec).unwrap();
        let pts = sample_points(
            &truth.masks[..48 * 48],
            48,
            |x, y| truth.point(0, y, x),
            256,
            seed,
        )
        .unwrap();
        for p in pts {
            let (u, v) = spec.camera.project(p.position).unwrap();
            assert!((u - p.x as f64).abs() <= 0.5 && (v - p.y as f64).abs() <= 0.5);
        }
    }
}

#[test]
fn static_scene_gives_identical_frames() {
    let mut spec = SceneSpec::empty(1, 5, 32, 32);
    spec.gravity = 0.0;
    spec.objects
        .push(ObjectSpec::ball(0.25, [0.1, 0.2, 0.0], [0.0; 3]));
    let (_, truth) = simulate(&spec).unwrap();
    let out = encode_percep(&truth, &spec.camera, &PercepConfig::default()).unwrap();
    for f in 1..5 {
        assert_eq!(out.clip.video.frame(f), out.clip.video.frame(0));
    }
}

#[test]
fn single_point_draws_one_disc_at_rounded_projection() {
    let mut spec = SceneSpec::empty(1, 2, 64, 64);
    spec.objects.push(ObjectSpec::ball(0.2, [0.0; 3], [0.0; 3]));
    let (_, truth) = simulate(&spec).unwrap();
    let p = [0.13, -0.21, 3.3];
    let track = PointTrack {
        color: [0.9, 0.1, 0.4],
        positions: vec![p; 2],
    };
    let cfg = PercepConfig {
        layers: LayerSet::TRACKS,
        ..Default::default()
    };
    let out = render_percep(&[track], &truth, &spec.camera, &cfg).unwrap();
    let cam = spec.camera;
    let (u, v) = (cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy);
    let (cu, cv) = (u.round() as i64, v.round() as i64);
    for y in 0..64i64 {
        for x in 0..64i64 {
            let inside = (x - cu).pow(2) + (y - cv).pow(2) <= 1;
            let c = out.clip.video.rgb(0, y as usize, x as usize);
            assert_eq!(
                c,
                if inside { [0.9, 0.1, 0.4] } else { [0.0; 3] },
                "({x}, {y})"
            );
        }
    }
}

#[test]
fn empty_tracks_only_is_background() {
    let mut spec = SceneSpec::empty(1, 3, 16, 16);
    spec.objects.push(ObjectSpec::ball(0.2, [0.0; 3], [0.0; 3]));
    let (_, truth) = simulate(&spec).unwrap();
    let cfg = PercepConfig {
        layers: LayerSet::TRACKS,
        background: [0.2, 0.3, 0.4],
        ..Default::default()
    };
    let out = render_percep(&[], &truth, &spec.camera, &cfg).unwrap();
    for f in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.clip.video.rgb(f, y, x), [0.2, 0.3, 0.4]);
            }
        }
    }
}

/// Region A has three times the pixels of region B; single-point draws
/// should land in A three times as often.
#[test]
fn sampling_is_uniform_over_masked_pixels() {
    let mut m = vec![0u16; 20 * 20];
    for i in 0..30 {
        m[i] = 1;
    }
    for i in 200..210 {
        m[i] = 2;
    }
    let mut counts = [0usize; 2];
    for seed in 0..10_000 {
        let p = sample_points(&m, 20, |_, _| [0.0, 0.0, 1.0], 1, seed).unwrap();
        counts[p[0].label as usize - 1] += 1;
    }
    let ratio = counts[0] as f64 / counts[1] as f64;
    assert!((ratio / 3.0 - 1.0).abs() < 0.05, "ratio {ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn exhausting_the_mask_returns_each_pixel_once(bits in proptest::collection::vec(any::<bool>(), 1..80), n in 1usize..120) {
        let m: Vec<u16> = bits.iter().map(|&b| b as u16).collect();
        let total = m.iter().filter(|&&v| v != 0).count();
        let res = sample_points(&m, 8, |x, y| [x as f64, y as f64, 1.0], n, 5);
        if total == 0 {
            prop_assert!(res.is_err());
        } else {
            let pts = res.unwrap();
            prop_assert_eq!(pts.len(), n.min(total));
            let mut idx: Vec<_> = pts.iter().map(|p| (p.y, p.x)).collect();
            idx.dedup();
            prop_assert_eq!(idx.len(), pts.len());
        }
    }
}
