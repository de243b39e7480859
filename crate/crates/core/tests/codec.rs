use physjoint_core::codec::{decode, decode_tensor, encode, CodecConfig};
use physjoint_core::tensor::Tensor;
use physjoint_core::video::VideoClip;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (CodecConfig, VideoClip) {
    let cfg = CodecConfig {
        temporal: rng.random_range(1..=3),
        spatial: rng.random_range(1..=4),
        shift: rng.random_range(-1.0..1.0),
        scale: rng.random_range(0.25..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    };
    let f = cfg.temporal * rng.random_range(1..=3);
    let h = cfg.spatial * rng.random_range(1..=4);
    let w = cfg.spatial * rng.random_range(1..=4);
    let pixels = Tensor::from_fn(&[3, f, h, w], |_| rng.random::<f64>());
    (cfg, VideoClip::new(pixels).unwrap())
}

#[test]
fn thousand_clip_roundtrip_and_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (cfg, clip) = random_case(&mut rng);
        let [c, f, h, w] = clip.shape();
        let (tf, sf) = (cfg.temporal, cfg.spatial);
        let latent = encode(&cfg, &clip).unwrap();
        assert_eq!(latent.shape(), [c * tf * sf * sf, f / tf, h / sf, w / sf]);
        assert_eq!(cfg.latent_shape(f, h, w).unwrap(), latent.shape());
        let back = decode(&latent).unwrap();
        assert_eq!(back.shape(), [c, f, h, w]);
        let err = back
            .tensor()
            .data()
            .iter()
            .zip(clip.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-6, "worst roundtrip error {worst}");
}

/// Element-by-element layout: channel `((c·t_f + dt)·s_f + dy)·s_f + dx`
/// of latent frame `i` holds pixel `(c, i·t_f + dt, y·s_f + dy, x·s_f + dx)`.
#[test]
fn layout_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (cfg, clip) = random_case(&mut rng);
        let latent = encode(&cfg, &clip).unwrap();
        let [lc, lf, lh, lw] = latent.shape();
        let (tf, sf) = (cfg.temporal, cfg.spatial);
        for ch in 0..lc {
            let (c, rest) = (ch / (tf * sf * sf), ch % (tf * sf * sf));
            let (dt, dy, dx) = (rest / (sf * sf), (rest / sf) % sf, rest % sf);
            for i in 0..lf {
                for y in 0..lh {
                    for x in 0..lw {
                        let got = latent.tensor().data()[((ch * lf + i) * lh + y) * lw + x];
                        let want = (clip.get(c, i * tf + dt, y * sf + dy, x * sf + dx) - cfg.shift)
                            * cfg.scale;
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
}

#[test]
fn bad_shapes_are_rejected() {
    let cfg = CodecConfig::default();
    assert!(encode(&cfg, &VideoClip::filled(3, 4, 4, [0.5; 3])).is_err());
    assert!(encode(&cfg, &VideoClip::filled(4, 5, 4, [0.5; 3])).is_err());
    assert!(decode_tensor(&cfg, Tensor::zeros(&[11, 2, 2, 2])).is_err());
    assert!(CodecConfig { scale: 0.0, ..cfg }.validate().is_err());
    assert!(CodecConfig { temporal: 0, ..cfg }.validate().is_err());
}

proptest! {
    #[test]
    fn decode_then_encode_is_identity_on_latents(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cfg, clip) = random_case(&mut rng);
        let latent = encode(&cfg, &clip).unwrap();
        let z = Tensor::randn(&latent.shape(), 1.0, &mut rng);
        let again = encode(&cfg, &decode_tensor(&cfg, z.clone()).unwrap()).unwrap();
        for (a, b) in again.tensor().data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
