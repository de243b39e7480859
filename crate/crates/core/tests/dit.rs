use physjoint_core::dit::{
    diffusion_loss_with, noise_forward, patchify, seeded_noise, token_grid, unpatchify,
    BackboneConfig, LatentExample, SingleStream,
};
use physjoint_core::params::Graph;
use physjoint_core::tensor::Tensor;
use physjoint_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(rope: bool) -> BackboneConfig {
    BackboneConfig {
        latent_channels: 4,
        width: 32,
        depth: 2,
        heads: 2,
        freq_dim: 16,
        rope,
        init_seed: 3,
        ..Default::default()
    }
}

fn batch(shape: &[usize], n: usize, seed: u64) -> Vec<LatentExample> {
    (0..n)
        .map(|i| LatentExample {
            latent: seeded_noise(shape, seed + i as u64),
            class: i % 5,
        })
        .collect()
}

#[test]
fn noise_forward_examples() {
    let z = Tensor::new(&[3], vec![1.0, -2.0, 0.5]);
    let e = Tensor::new(&[3], vec![0.3, 0.1, -0.7]);
    assert_eq!(noise_forward(&z, 0.0, &e).unwrap(), z);
    assert_eq!(noise_forward(&Tensor::zeros(&[3]), 1.0, &e).unwrap(), e);
    let half = noise_forward(&Tensor::scalar(2.0), 0.5, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(half.item(), 2.5);
    assert!(matches!(
        noise_forward(&z, 1.5, &e),
        Err(Error::Timestep(_))
    ));
    assert!(matches!(
        noise_forward(&z, -0.1, &e),
        Err(Error::Timestep(_))
    ));
}

#[test]
fn config_validation() {
    assert!(BackboneConfig {
        depth: 1,
        ..tiny(true)
    }
    .validate()
    .is_err());
    assert!(BackboneConfig {
        heads: 3,
        ..tiny(true)
    }
    .validate()
    .is_err());
    assert!(BackboneConfig::default().validate().is_ok());
    assert!(matches!(
        token_grid(&[4, 3, 4, 4], [2, 2, 2]),
        Err(Error::Indivisible { axis: "frame", .. })
    ));
}

proptest! {
    #[test]
    fn patchify_roundtrips(c in 1usize..4, f in 1usize..3, h in 1usize..3, w in 1usize..3, pt in 1usize..3, ph in 1usize..3, pw in 1usize..3, seed in 0u64..1000) {
        let shape = [c, f * pt, h * ph, w * pw];
        let z = seeded_noise(&shape, seed);
        let tok = patchify(&z, [pt, ph, pw]).unwrap();
        let grid = token_grid(&shape, [pt, ph, pw]).unwrap();
        prop_assert_eq!(tok.shape(), &[f * h * w, c * pt * ph * pw]);
        prop_assert_eq!(unpatchify(&tok, c, grid, [pt, ph, pw]), z);
    }
}

#[test]
fn output_matches_latent_shape_and_is_deterministic() {
    let m = SingleStream::new(&tiny(true)).unwrap();
    for shape in [[4, 2, 4, 4], [4, 3, 2, 6]] {
        let z = seeded_noise(&shape, 1);
        let a = m.predict(&z, Some(1), 0.4).unwrap();
        let b = m.predict(&z, Some(1), 0.4).unwrap();
        assert_eq!(a.shape(), &shape);
        assert_eq!(a, b);
        let mut g = Graph::frozen(&m.store);
        let out = m.denoise(&mut g, &z, None, 0.4).unwrap();
        assert_eq!(out.hidden.len(), 2);
    }
    let mut g = Graph::frozen(&m.store);
    assert!(m
        .denoise(&mut g, &seeded_noise(&[3, 2, 4, 4], 0), None, 0.1)
        .is_err());
}

#[test]
fn time_embedding_is_finite_on_unit_interval() {
    let m = SingleStream::new(&tiny(true)).unwrap();
    for k in 0..=100 {
        let mut g = Graph::frozen(&m.store);
        let e = m.dit.time_embedding(&mut g, k as f64 / 100.0);
        assert!(g.value(e).all_finite());
    }
}

/// Attention without positions is permutation-equivariant over tokens.
#[test]
fn shuffled_tokens_give_shuffled_outputs_without_rope() {
    let m = SingleStream::new(&tiny(false)).unwrap();
    let z = seeded_noise(&[4, 2, 4, 4], 9);
    let tok = patchify(&z, m.dit.cfg.patch).unwrap();
    let n = tok.shape()[0];
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let run = |t: Tensor| {
        let mut g = Graph::frozen(&m.store);
        let x = g.constant(t);
        let c = m.dit.condition(&mut g, 0.3, Some(2));
        let out = m.dit.forward_tokens(&mut g, x, c, None);
        g.value(out.eps).clone()
    };
    let base = run(tok.clone());
    let mut g = Graph::frozen(&m.store);
    let tv = g.constant(tok);
    let shuffled = g.gather_rows(tv, &perm);
    let shuffled = g.value(shuffled).clone();
    let out = run(shuffled);
    let p = out.shape()[1];
    for (i, &src) in perm.iter().enumerate() {
        for k in 0..p {
            let (a, b) = (out.data()[i * p + k], base.data()[src * p + k]);
            assert!((a - b).abs() <= 1e-12, "token {i}: {a} vs {b}");
        }
    }
}

#[test]
fn loss_is_positive_reproducible_and_zero_for_oracle() {
    let m = SingleStream::new(&tiny(true)).unwrap();
    let data = batch(&[4, 2, 4, 4], 3, 10);
    let loss = |seed| {
        let mut g = Graph::new(&m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = m.diffusion_loss(&mut g, &data, &mut rng).unwrap();
        g.value(l).item()
    };
    let (a, b) = (loss(4), loss(4));
    assert!(a > 0.0);
    assert_eq!(a.to_bits(), b.to_bits());

    let mut g = Graph::new(&m.store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = diffusion_loss_with(
        &mut g,
        &data,
        [1, 2, 2],
        0.1,
        &mut rng,
        |g, i, z_t, _, t| {
            let eps = z_t.zip_map(&data[i].latent, |z, z0| (z - z0) / t);
            Ok(g.constant(patchify(&eps, [1, 2, 2]).unwrap()))
        },
    )
    .unwrap();
    assert!(g.value(l).item() < 1e-20);

    let mut g = Graph::new(&m.store);
    assert!(matches!(
        m.diffusion_loss(&mut g, &[], &mut rng),
        Err(Error::EmptyBatch)
    ));
}

#[test]
fn zero_denoiser_loss_is_unit_variance() {
    let data = batch(&[4, 4, 8, 8], 64, 0);
    let store = physjoint_core::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = diffusion_loss_with(&mut g, &data, [1, 2, 2], 0.0, &mut rng, |g, _, z, _, _| {
        let n = z.len() / 16;
        Ok(g.constant(Tensor::zeros(&[n, 16])))
    })
    .unwrap();
    let v = g.value(l).item();
    assert!((v - 1.0).abs() < 0.05, "{v}");
}

/// Directional derivatives of the training loss against central differences.
#[test]
fn loss_gradient_matches_finite_differences() {
    let mut m = SingleStream::new(&tiny(true)).unwrap();
    // Make the zero-initialised parts non-trivial.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for id in m.store.ids().collect::<Vec<_>>() {
        let t = m.store.get_mut(id);
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        t.add_assign(&noise);
    }
    let data = batch(&[4, 2, 4, 4], 2, 30);
    let eval = |store: &physjoint_core::params::ParamStore| {
        let model = SingleStream {
            store: store.clone(),
            dit: m.dit.clone(),
        };
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = model.diffusion_loss(&mut g, &data, &mut rng).unwrap();
        (g.value(l).item(), g.backward_params(l))
    };
    let (_, grads) = eval(&m.store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let mut dir_rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let dirs: Vec<Tensor> = m
            .store
            .ids()
            .map(|id| Tensor::randn(m.store.get(id).shape(), 1.0, &mut dir_rng))
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| {
                g.as_ref().map_or(0.0, |g| {
                    g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()
                })
            })
            .sum();
        let shifted = |s: f64| {
            let mut st = m.store.clone();
            for (id, d) in st.ids().collect::<Vec<_>>().into_iter().zip(&dirs) {
                let t = st.get_mut(id);
                *t = t.zip_map(d, |a, b| a + s * b);
            }
            eval(&st).0
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
    let _ = &mut m;
}
