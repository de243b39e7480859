//! Acceptance checks, one line each. Pass criterion numbers as arguments to
//! run a subset. Exits non-zero if any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use physjoint::ablate::{ablate, Axis};
use physjoint::config::ExperimentConfig;
use physjoint::dataset::{self, clip_dir, ClipEntry, TruthFile, RGB_DIR};
use physjoint::io::{read_frames, read_json};
use physjoint::pipeline::Run;
use physjoint::stages;
use physjoint_core::autodiff::Var;
use physjoint_core::bct::{
    ChannelFusion, JointExample, Modality, ParallelTeacher, Teacher, TeacherConfig,
};
use physjoint_core::codec::{decode, encode, CodecConfig};
use physjoint_core::curation::{
    assign_labels, clip_weights, imbalance_ratio, irbl_weights, label_rows, resample, ScoreRecord,
    NUM_PRIMITIVES,
};
use physjoint_core::distill::{
    relation_spatial, relation_temporal, DistillConfig, DistillObjective, Distiller,
};
use physjoint_core::dit::{seeded_noise, token_grid, BackboneConfig, LatentExample, SingleStream};
use physjoint_core::params::{Graph, ParamStore};
use physjoint_core::percep::{encode_percep, sample_points, PercepConfig};
use physjoint_core::sampler::{sample_latent, SamplerConfig};
use physjoint_core::tensor::Tensor;
use physjoint_core::toypc::{aggregate, evaluate_sample, DetectorConfig};
use physjoint_core::train::{
    stage1_train, window_means, Objective, SingleObjective, StepLog, TrainConfig,
};
use physjoint_core::video::VideoClip;
use physjoint_core::world::{simulate, SceneClass, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn backbone(width: usize, depth: usize, heads: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        latent_channels: 4,
        width,
        depth,
        heads,
        freq_dim: 16,
        init_seed: seed,
        ..Default::default()
    }
}

fn max_diff(g: &Graph<'_>, a: Var, b: Var) -> f64 {
    g.value(a).max_abs_diff(g.value(b))
}

/// Adds small noise to every parameter so zero-initialised parts matter.
fn perturb(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        let n = Tensor::randn(t.shape(), std, &mut rng);
        t.add_assign(&n);
    }
}

fn zero_init_decoupling() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let depth = rng.random_range(2..7);
        let width = [16, 32, 48][rng.random_range(0..3)];
        let bb = BackboneConfig {
            rope: rng.random_bool(0.5),
            ..backbone(width, depth, 2, case)
        };
        let cfg = TeacherConfig {
            backbone: bb,
            pre_links: rng.random_bool(0.5),
            ..Default::default()
        };
        let m = ParallelTeacher::new(&cfg).map_err(err)?;
        let shape = [4, 2 * rng.random_range(1..3), 4, 2 * rng.random_range(1..4)];
        let zr = seeded_noise(&shape, 100 + case);
        let zp = seeded_noise(&shape, 200 + case);
        let class = if rng.random_bool(0.2) {
            None
        } else {
            Some(rng.random_range(0..5))
        };
        let t: f64 = rng.random();
        let mut g = Graph::frozen(&m.store);
        let joint = m.forward(&mut g, &zr, &zp, class, t, true).map_err(err)?;
        let r = m
            .branch_forward(&mut g, &zr, class, t, Modality::Rgb)
            .map_err(err)?;
        let p = m
            .branch_forward(&mut g, &zp, class, t, Modality::Percep)
            .map_err(err)?;
        worst = worst.max(max_diff(&g, joint.eps_rgb, r.eps)).max(max_diff(
            &g,
            joint.eps_percep,
            p.eps,
        ));
        for l in 0..depth {
            worst = worst
                .max(max_diff(&g, joint.hidden_rgb[l], r.hidden[l]))
                .max(max_diff(&g, joint.hidden_percep[l], p.hidden[l]));
        }
    }
    check(worst <= 1e-6, || format!("max abs diff {worst:.3e}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("20 cases, max abs diff {worst:.1e}"))
}

fn channel_zero_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let depth = rng.random_range(2..6);
        let bb = BackboneConfig {
            rope: rng.random_bool(0.5),
            ..backbone(32, depth, 4, case)
        };
        let fused = ChannelFusion::new(&bb).map_err(err)?;
        let single = SingleStream::new(&bb).map_err(err)?;
        let shape = [4, 2, 4, 2 * rng.random_range(1..4)];
        let zr = seeded_noise(&shape, case);
        let zp = seeded_noise(&shape, case + 50).map(|v| 3.0 * v);
        let class = if rng.random_bool(0.2) {
            None
        } else {
            Some(rng.random_range(0..5))
        };
        let t: f64 = rng.random();
        let mut g = Graph::frozen(&fused.store);
        let out = fused.forward(&mut g, &zr, &zp, class, t).map_err(err)?;
        let mut gs = Graph::frozen(&single.store);
        let base = single.denoise(&mut gs, &zr, class, t).map_err(err)?;
        worst = worst.max(g.value(out.eps_rgb).max_abs_diff(gs.value(base.eps)));
    }
    check(worst <= 1e-6, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("20 cases, max abs diff {worst:.1e}"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn relation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut asym, mut diag) = (0.0f64, 0.0f64, 0.0f64);
    let mut grids = vec![(4, 16, 8), (1, 1, 1), (4, 1, 8), (1, 16, 1)];
    grids.extend((0..60).map(|_| {
        (
            rng.random_range(1..=4),
            rng.random_range(1..=16),
            rng.random_range(1..=8),
        )
    }));
    for (f, n, d) in grids {
        let x = Tensor::randn(&[f, n, d], 1.0, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::frozen(&store);
        let v = g.constant(x.clone());
        let (s, t) = (relation_spatial(&mut g, v), relation_temporal(&mut g, v));
        let (spa, temp) = (g.value(s).data(), g.value(t).data());
        let token = |fi: usize, si: usize| &x.data()[(fi * n + si) * d..(fi * n + si + 1) * d];
        for fi in 0..f {
            for i in 0..n {
                for j in 0..n {
                    let got = spa[(fi * n + i) * n + j];
                    worst = worst.max((got - cosine(token(fi, i), token(fi, j))).abs());
                    asym = asym.max((got - spa[(fi * n + j) * n + i]).abs());
                }
                diag = diag.max((spa[(fi * n + i) * n + i] - 1.0).abs());
            }
        }
        for si in 0..n {
            for a in 0..f {
                for b in 0..f {
                    let got = temp[(si * f + a) * f + b];
                    worst = worst.max((got - cosine(token(a, si), token(b, si))).abs());
                    asym = asym.max((got - temp[(si * f + b) * f + a]).abs());
                }
                diag = diag.max((temp[(si * f + a) * f + a] - 1.0).abs());
            }
        }
    }
    check(worst <= 1e-6 && asym <= 1e-6 && diag <= 1e-6, || {
        format!("oracle {worst:.1e}, asymmetry {asym:.1e}, diagonal {diag:.1e}")
    })?;
    Ok(format!(
        "64 grids up to 4x16x8, oracle diff {worst:.1e}, asymmetry {asym:.1e}, diagonal {diag:.1e}"
    ))
}

fn loss_at<O: Objective>(obj: &O, part: Option<usize>, seed: u64) -> (f64, Vec<Option<Tensor>>) {
    let batch: Vec<usize> = (0..obj.len()).collect();
    let mut g = Graph::new(obj.store());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (total, parts) = obj.loss(&mut g, &batch, &mut rng).expect("loss");
    let l = part.map_or(total, |k| parts[k]);
    (g.value(l).item(), g.backward_params(l))
}

/// Worst relative error of the analytic directional derivative against
/// central differences over `dirs` random directions in parameter space.
fn gradient_check<O: Objective>(obj: &mut O, part: Option<usize>, dirs: u64) -> f64 {
    let base = obj.store().clone();
    let (_, grads) = loss_at(obj, part, 9);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..dirs {
        let mut dr = ChaCha8Rng::seed_from_u64(1000 + k);
        let d: Vec<Tensor> = base
            .ids()
            .map(|id| Tensor::randn(base.get(id).shape(), 1.0, &mut dr))
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&d)
            .map(|(g, d)| {
                g.as_ref().map_or(0.0, |g| {
                    g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()
                })
            })
            .sum();
        let mut shifted = |s: f64| {
            let store = obj.store_mut();
            for (id, dir) in base.ids().zip(&d) {
                *store.get_mut(id) = base.get(id).zip_map(dir, |a, b| a + s * b);
            }
            loss_at(obj, part, 9).0
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    *obj.store_mut() = base;
    worst
}

fn joint_examples(n: usize, shape: &[usize]) -> Vec<JointExample> {
    (0..n as u64)
        .map(|i| JointExample {
            rgb: seeded_noise(shape, 10 + i),
            percep: seeded_noise(shape, 50 + i).map(|v| 0.5 * v),
            class: i as usize % 5,
        })
        .collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let bb = backbone(32, 2, 4, 4);
    let shape = [4, 2, 4, 4];
    let data = joint_examples(2, &shape);

    let mut model = SingleStream::new(&bb).map_err(err)?;
    perturb(&mut model.store, 0.05, 1);
    let latents: Vec<LatentExample> = data
        .iter()
        .map(|e| LatentExample {
            latent: e.rgb.clone(),
            class: e.class,
        })
        .collect();
    let diffusion = gradient_check(
        &mut SingleObjective {
            model: &mut model,
            data: &latents,
        },
        None,
        50,
    );

    let mut teacher = ParallelTeacher::new(&TeacherConfig {
        backbone: bb,
        ..Default::default()
    })
    .map_err(err)?;
    perturb(&mut teacher.store, 0.05, 2);
    let mut distiller = Distiller::from_teacher(&teacher, 3).map_err(err)?;
    perturb(&mut distiller.store, 0.05, 4);
    let cfg = DistillConfig::default();
    let mut obj = DistillObjective {
        distiller: &mut distiller,
        teacher: &teacher,
        data: &data,
        cfg: &cfg,
    };
    let relation = gradient_check(&mut obj, Some(1), 50);

    check(diffusion <= 1e-3 && relation <= 1e-3, || {
        format!("diffusion {diffusion:.1e}, relation {relation:.1e}")
    })?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("50 directions each on a 2-block width-32 model: diffusion {diffusion:.1e}, relation {relation:.1e}"))
}

fn brute_labels(scores: &[Vec<f64>], tau: f64) -> Vec<Vec<bool>> {
    scores
        .iter()
        .map(|row| {
            let mut y: Vec<bool> = row.iter().map(|&s| s >= tau).collect();
            if !y.contains(&true) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                y[row.iter().position(|&s| s == max).unwrap()] = true;
            }
            y
        })
        .collect()
}

fn brute_probabilities(y: &[Vec<bool>]) -> (Vec<Option<f64>>, Vec<f64>, Vec<f64>) {
    let m = y[0].len();
    let counts: Vec<usize> = (0..m).map(|j| y.iter().filter(|r| r[j]).count()).collect();
    let max = *counts.iter().max().unwrap();
    let irbl: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| max as f64 / c as f64))
        .collect();
    let total: f64 = irbl.iter().flatten().sum();
    let w: Vec<f64> = y
        .iter()
        .map(|r| {
            (0..m)
                .filter(|&j| r[j])
                .map(|j| irbl[j].unwrap())
                .sum::<f64>()
                / total
        })
        .collect();
    let sum: f64 = w.iter().sum();
    let p = w.iter().map(|v| v / sum).collect();
    (irbl, w, p)
}

fn brute_draws(p: &[f64], n_out: usize, seed: u64, with_replacement: bool) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live = p.to_vec();
    let mut out = Vec::new();
    for _ in 0..n_out {
        let u: f64 = rng.random();
        let total: f64 = live.iter().sum();
        let pick = if total > 0.0 {
            let mut acc = 0.0;
            let positive: Vec<usize> = (0..live.len()).filter(|&i| live[i] > 0.0).collect();
            *positive
                .iter()
                .find(|&&i| {
                    acc += live[i];
                    u * total < acc
                })
                .unwrap_or(positive.last().unwrap())
        } else {
            let free: Vec<usize> = (0..live.len()).filter(|i| !out.contains(i)).collect();
            free[((u * free.len() as f64) as usize).min(free.len() - 1)]
        };
        out.push(pick);
        if !with_replacement {
            live[pick] = 0.0;
        }
    }
    out
}

fn curation_oracle() -> Outcome {
    let (n, draws) = (50, 1000u64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gap = 0.0f64;
    for trial in 0..200u64 {
        let integral = rng.random_bool(0.5);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..NUM_PRIMITIVES)
                    .map(|_| {
                        if integral {
                            rng.random_range(1..=5) as f64
                        } else {
                            rng.random_range(1.0..=5.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let tau = [2.5, 3.0, 4.0, 4.5, 5.0][trial as usize % 5];
        let records: Vec<ScoreRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| ScoreRecord {
                video_id: format!("v{i}"),
                vqa: 4.0,
                reality: 5,
                scores: s.clone(),
                subject_phrases: vec![],
            })
            .collect();
        let y = assign_labels(&records, tau);
        let want_y = brute_labels(&scores, tau);
        check(y.rows == want_y, || {
            format!("labels differ in trial {trial}")
        })?;
        let irbl = irbl_weights(&y).map_err(err)?;
        let (want_irbl, want_w, p) = brute_probabilities(&want_y);
        check(irbl.ratios == want_irbl, || {
            format!("IRBL differs in trial {trial}")
        })?;
        check(clip_weights(&y, &irbl) == want_w, || {
            format!("weights differ in trial {trial}")
        })?;
        for (n_out, with) in [(n, true), (20, false), (n, false)] {
            let r = resample(&y, &irbl, n_out, trial, with).map_err(err)?;
            check(r.probabilities == p, || {
                format!("probabilities differ in trial {trial}")
            })?;
            check(r.indices == brute_draws(&p, n_out, trial, with), || {
                format!("draws differ in trial {trial}")
            })?;
        }
        let mut freq = vec![0.0; n];
        for s in 0..draws {
            for i in resample(&y, &irbl, n, trial * 10_000 + s, true)
                .map_err(err)?
                .indices
            {
                freq[i] += 1.0 / (draws as f64 * n as f64);
            }
        }
        gap = gap.max(
            freq.iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    check(gap <= 0.02, || format!("frequency gap {gap:.4}"))?;
    Ok(format!("200 matrices of 50x17: labels, IRBL, weights and draws exact; frequency gap {gap:.4} over 1000 seeded draws"))
}

fn balance_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut decreased, mut trials) = (0, 0);
    while trials < 100 {
        let scores: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                (0..NUM_PRIMITIVES)
                    .map(|j| {
                        if rng.random_bool(0.6 * 0.7f64.powi(j as i32)) {
                            5.0
                        } else {
                            rng.random_range(1.0..3.9)
                        }
                    })
                    .collect()
            })
            .collect();
        let y = label_rows(&scores, 4.0);
        let irbl = irbl_weights(&y).map_err(err)?;
        let before = imbalance_ratio(&irbl.counts).unwrap();
        if before < 5.0 {
            continue;
        }
        let r = resample(&y, &irbl, 25, trials, false).map_err(err)?;
        decreased += usize::from(imbalance_ratio(&r.after).unwrap() < before);
        trials += 1;
    }
    check(decreased >= 95, || {
        format!("decreased in {decreased} of 100")
    })?;
    Ok(format!(
        "imbalance decreased in {decreased} of 100 long-tail trials"
    ))
}

fn codec_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cfg = CodecConfig {
            temporal: rng.random_range(1..=3),
            spatial: rng.random_range(1..=4),
            shift: rng.random_range(-1.0..1.0),
            scale: rng.random_range(0.25..4.0),
        };
        let (f, h, w) = (
            cfg.temporal * rng.random_range(1..=3),
            cfg.spatial * rng.random_range(1..=4),
            cfg.spatial * rng.random_range(1..=4),
        );
        let clip = VideoClip::new(Tensor::from_fn(&[3, f, h, w], |_| rng.random())).map_err(err)?;
        let z = encode(&cfg, &clip).map_err(err)?;
        let (tf, sf) = (cfg.temporal, cfg.spatial);
        check(
            z.shape() == [3 * tf * sf * sf, f / tf, h / sf, w / sf],
            || format!("latent shape {:?}", z.shape()),
        )?;
        let back = decode(&z).map_err(err)?;
        check(back.shape() == [3, f, h, w], || {
            format!("decoded shape {:?}", back.shape())
        })?;
        worst = worst.max(back.tensor().max_abs_diff(clip.tensor()));
    }
    check(worst <= 1e-6, || format!("roundtrip error {worst:.1e}"))?;
    Ok(format!(
        "1000 clips, shapes exact, roundtrip error {worst:.1e}"
    ))
}

/// The 32-clip dataset shared by the percep and training checks.
struct Dataset {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    data: PathBuf,
    percep: PathBuf,
    entries: Vec<ClipEntry>,
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let (data, percep) = (dir.path().join("data"), dir.path().join("percep"));
        stages::gen_data(&cfg, &data).unwrap();
        stages::encode_percep(&cfg, cfg.modality, &data, &percep).unwrap();
        let entries = dataset::read_index(&data).unwrap();
        Dataset {
            _dir: dir,
            cfg,
            data,
            percep,
            entries,
        }
    })
}

fn percep_fidelity() -> Outcome {
    let ds = dataset();
    let (mut points, mut owned, mut worst) = (0, 0, 0.0f64);
    for e in &ds.entries {
        let rgb = read_frames(&clip_dir(&ds.data, &e.video_id).join(RGB_DIR)).map_err(err)?;
        let percep = read_frames(&ds.percep.join(&e.video_id)).map_err(err)?;
        check(percep.shape() == rgb.shape(), || {
            format!(
                "{}: percep {:?} vs rgb {:?}",
                e.video_id,
                percep.shape(),
                rgb.shape()
            )
        })?;

        let path = clip_dir(&ds.data, &e.video_id).join("truth.json");
        let file: TruthFile = read_json(&path).map_err(err)?;
        let truth = file.resimulate(&path).map_err(err)?;
        let cfg = PercepConfig {
            seed: ds.cfg.percep.seed ^ file.spec.seed,
            ..ds.cfg.percep.clone()
        };
        let render = encode_percep(&truth, &file.spec.camera, &cfg).map_err(err)?;
        let v = &render.clip.video;
        let (f, h, w) = (truth.frames, truth.height, truth.width);
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    if let Some(k) = render.owners[(fi * h + y) * w + x] {
                        check(v.rgb(fi, y, x) == render.tracks[k as usize].color, || {
                            format!("{}: track {k} changes colour in frame {fi}", e.video_id)
                        })?;
                        owned += 1;
                    }
                }
            }
        }
        let sampled = sample_points(
            &truth.masks[..w * h],
            w,
            |x, y| truth.point(0, y, x),
            cfg.n_points,
            cfg.seed,
        )
        .map_err(err)?;
        for p in sampled {
            let (u, v) = file
                .spec
                .camera
                .project(p.position)
                .ok_or("sampled point behind the camera")?;
            worst = worst
                .max((u - p.x as f64).abs())
                .max((v - p.y as f64).abs());
            points += 1;
        }
    }
    check(worst <= 0.5, || {
        format!("re-projection error {worst:.3} px")
    })?;
    Ok(format!("{} clips: shapes match, {owned} track pixels keep their colour, {points} points re-project within {worst:.1e} px", ds.entries.len()))
}

fn drop_of(logs: &[StepLog], part: Option<usize>) -> f64 {
    let xs: Vec<f64> = logs
        .iter()
        .map(|l| part.map_or(l.loss, |k| l.parts[k]))
        .collect();
    let (head, tail) = window_means(&xs, stages::LOSS_WINDOW).unwrap();
    1.0 - tail / head
}

fn smoke_training() -> Outcome {
    let start = Instant::now();
    let ds = dataset();
    let data =
        dataset::load_examples(&ds.data, &ds.percep, &ds.entries, &ds.cfg.codec).map_err(err)?;
    let tcfg = ds.cfg.teacher_config(physjoint_core::bct::Arch::Parallel);
    let s1 = TrainConfig {
        steps: 500,
        ..TrainConfig::default()
    };
    let s2 = DistillConfig {
        train: TrainConfig {
            steps: 200,
            ..DistillConfig::default().train
        },
        ..DistillConfig::default()
    };
    let run = || -> Result<(Vec<StepLog>, Vec<StepLog>, ParamStore), String> {
        let mut teacher = Teacher::new(&tcfg).map_err(err)?;
        let l1 = stage1_train(&mut teacher, &data, &s1, |_, _| Ok(())).map_err(err)?;
        let Teacher::Parallel(p) = &teacher else {
            return Err("not a parallel teacher".into());
        };
        let mut distiller = Distiller::from_teacher(p, 0).map_err(err)?;
        let l2 =
            physjoint_core::distill::stage2_train(&mut distiller, p, &data, &s2, |_, _| Ok(()))
                .map_err(err)?;
        Ok((l1, l2, distiller.store))
    };
    let (l1, l2, store) = run()?;
    let (d1, d2) = (drop_of(&l1, None), drop_of(&l2, Some(1)));
    let (r1, r2, rstore) = run()?;
    let same = l1 == r1 && l2 == r2 && store.ids().all(|id| store.get(id) == rstore.get(id));
    check(data.len() == 32, || format!("{} clips", data.len()))?;
    check(d1 >= 0.30, || {
        format!("stage I joint loss fell {:.1}%", 100.0 * d1)
    })?;
    check(d2 >= 0.20, || {
        format!("stage II relation loss fell {:.1}%", 100.0 * d2)
    })?;
    check(same, || "reruns with the same seed differ".into())?;
    within(start, Duration::from_secs(20 * 60))?;
    Ok(format!(
        "32 clips; stage I joint loss -{:.1}% over 500 steps, stage II relation loss -{:.1}% over 200 steps; reruns bit-identical",
        100.0 * d1,
        100.0 * d2
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn student_parity() -> Outcome {
    let cfg = ExperimentConfig::default();
    let bb = cfg.backbone();
    let shape = cfg.latent_shape().map_err(err)?;
    let teacher = ParallelTeacher::new(&cfg.teacher_config(physjoint_core::bct::Arch::Parallel))
        .map_err(err)?;
    let student = Distiller::from_teacher(&teacher, 0)
        .map_err(err)?
        .export_student();
    let base = SingleStream::new(&bb).map_err(err)?;
    check(student.num_scalars() == base.num_scalars(), || {
        format!(
            "{} vs {} parameters",
            student.num_scalars(),
            base.num_scalars()
        )
    })?;
    check(student.store.names().eq(base.store.names()), || {
        "parameter names differ".into()
    })?;

    let z = seeded_noise(&shape, 0);
    let tokens = |m: &SingleStream| -> Result<Vec<usize>, String> {
        let mut g = Graph::frozen(&m.store);
        let out = m.denoise(&mut g, &z, Some(0), 0.5).map_err(err)?;
        Ok(g.value(out.eps).shape().to_vec())
    };
    let (ts, tb) = (tokens(&student)?, tokens(&base)?);
    let grid = token_grid(&shape, bb.patch).map_err(err)?.len();
    check(ts == tb && ts[0] == grid, || {
        format!("tokens {ts:?} vs {tb:?}")
    })?;

    let sampler = SamplerConfig {
        steps: 20,
        guidance: 1.0,
    };
    let time = |m: &SingleStream, seed: u64| -> Result<f64, String> {
        let t = Instant::now();
        sample_latent(m, &shape, Some(0), &sampler, seed).map_err(err)?;
        Ok(t.elapsed().as_secs_f64())
    };
    time(&student, 0)?;
    time(&base, 0)?;
    let (mut ls, mut lb) = (Vec::new(), Vec::new());
    for k in 0..20 {
        ls.push(time(&student, k)?);
        lb.push(time(&base, k)?);
    }
    let (ms, mb) = (median(ls), median(lb));
    let ratio = ms / mb;
    check((ratio - 1.0).abs() <= 0.02, || {
        format!("median latency {:.1} ms vs {:.1} ms", 1e3 * ms, 1e3 * mb)
    })?;
    Ok(format!(
        "{} parameters each, {grid} tokens per step each, median sampling latency {:.1} ms vs {:.1} ms over 20 runs ({:+.2}%)",
        base.num_scalars(),
        1e3 * ms,
        1e3 * mb,
        100.0 * (ratio - 1.0)
    ))
}

const ABLATION: &str = r#"
name = "ablation"
[world]
clips = 16
[backbone]
width = 32
heads = 2
depth = 4
freq_dim = 16
[stage1]
steps = 100
[distill.train]
steps = 50
[sample]
per_class = 1
steps = 10
"#;

fn ablation_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = ExperimentConfig::from_toml(ABLATION).map_err(err)?;
    cfg.output_root = dir.path().to_path_buf();
    let run = Run::new(cfg).map_err(err)?;
    let mut report = Vec::new();
    for axis in Axis::ALL {
        let table = ablate(&run, axis, |_| {}).map_err(err)?;
        check(table.row_names() == axis.rows(), || {
            format!("{axis}: rows {:?}", table.row_names())
        })?;
        let failed: Vec<&str> = table
            .rows
            .iter()
            .filter(|r| r.status != "ok")
            .map(|r| r.row.as_str())
            .collect();
        check(failed.is_empty(), || {
            format!("{axis}: failed rows {failed:?}")
        })?;
        let same: Vec<_> = table
            .rows
            .iter()
            .filter(|r| r.row != "student")
            .map(|r| (r.steps, r.train_clips))
            .collect();
        check(same.windows(2).all(|w| w[0] == w[1]), || {
            format!("{axis}: unequal budgets {same:?}")
        })?;
        let out = run.dir.join("ablate").join(axis.name());
        for f in [
            "table.csv",
            "table.json",
            "val_loss.svg",
            "val_loss.png",
            "toypc.svg",
            "toypc.png",
        ] {
            check(out.join(f).is_file(), || format!("{axis}: missing {f}"))?;
        }
        if axis == Axis::Arch {
            let loss = |name: &str| {
                table
                    .rows
                    .iter()
                    .find(|r| r.row == name)
                    .and_then(|r| r.val_loss)
                    .unwrap_or(f64::NAN)
            };
            let (p, c, s) = (loss("parallel"), loss("channel"), loss("spatial"));
            let verdict = if p < c.min(s) { "below" } else { "not below" };
            report.push(format!(
                "parallel {p:.4} is {verdict} channel {c:.4} / spatial {s:.4}"
            ));
        }
    }
    Ok(format!(
        "declared rows on all three axes with CSV and charts; joint validation loss: {}",
        report.join("")
    ))
}

fn toypc_ceiling() -> Outcome {
    let cfg = DetectorConfig::default();
    let mean = |size: usize| {
        let reports = (0..40u64).map(|seed| {
            let class = SceneClass::ALL[seed as usize % 5];
            let spec = SceneSpec::random(class, seed, 16, size, size);
            let (clip, _) = simulate(&spec).unwrap();
            evaluate_sample(&clip, class, &spec.camera, &cfg)
        });
        aggregate(reports.collect()).mean
    };
    let mut parts = Vec::new();
    for size in [32, 64] {
        let m = mean(size);
        check(
            m.penetration_rate <= 0.01 && m.count_stability >= 0.99,
            || format!("{size} px: {m:?}"),
        )?;
        parts.push(format!(
            "{size} px penetration {:.3} stability {:.3}",
            m.penetration_rate, m.count_stability
        ));
    }
    let small = mean(16);
    Ok(format!(
        "ground-truth clips: {}; at 16 px, where full occlusion is possible, penetration {:.3} stability {:.3}",
        parts.join(", "),
        small.penetration_rate,
        small.count_stability
    ))
}

fn main() {
    let checks: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "zero-init decoupling", zero_init_decoupling),
        (2, "channel-wise zero-init neutrality", channel_zero_init),
        (3, "relation maps against brute force", relation_oracle),
        (4, "gradients against finite differences", gradients),
        (5, "curation math against brute force", curation_oracle),
        (6, "resampling balance trend", balance_trend),
        (7, "latent codec exactness", codec_exactness),
        (8, "perception encoding fidelity", percep_fidelity),
        (9, "smoke training", smoke_training),
        (10, "student parity", student_parity),
        (11, "ablation harness contract", ablation_contract),
        (12, "toy physics proxy ceiling", toypc_ceiling),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f) in checks {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}"))),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
