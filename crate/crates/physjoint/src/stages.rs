//! The work behind each pipeline stage. Every function reads its inputs
//! from earlier stage folders and writes into its own output folder.

use std::collections::BTreeMap;
use std::path::Path;

use physjoint_core::bct::{Arch, JointExample, ParallelTeacher, Teacher};
use physjoint_core::curation::{
    curate as curate_records, imbalance_ratio, CurationConfig, PRIMITIVES,
};
use physjoint_core::distill::{stage2_train, Distiller};
use physjoint_core::dit::{LatentExample, SingleStream};
use physjoint_core::toypc::SampleReport;
use physjoint_core::train::{stage1_train, train, window_means, SingleObjective, StepLog};
use physjoint_core::world::SceneClass;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_single, load_teacher, save_single, save_teacher, BASELINE, STUDENT};
use crate::config::{ExperimentConfig, Modality};
use crate::dataset::{self, clip_dir, ClipEntry, RGB_DIR};
use crate::error::{Error, Result};
use crate::eval::{self, Labeled, Scored, ValLoss};
use crate::io::{create_dir, read_frames, read_json, write_atomic, write_frames, write_json};
use crate::plot::{bar_chart, line_chart, BarGroup, Labels, Series};

pub const CURATED_FILE: &str = "curated.json";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const SAMPLE_INDEX: &str = "samples.json";
/// Noise draws per validation clip.
pub const VAL_DRAWS: usize = 4;
pub const LOSS_WINDOW: usize = 10;

/// Seed of the validation noise draws, shared by every scored model.
pub fn val_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed ^ 0x5a5a
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    dataset::generate(out, &cfg.world, cfg.seed)?;
    Ok(())
}

pub fn encode_percep(
    cfg: &ExperimentConfig,
    modality: Modality,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let entries = dataset::read_index(data)?;
    create_dir(out)?;
    dataset::encode_percep_all(data, &entries, &cfg.percep_config(modality), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub pool: usize,
    pub after_quality: usize,
    pub after_reality: usize,
    pub after_richness: usize,
    /// Resampled ids, with repeats.
    pub selected: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub counts_before: Vec<usize>,
    pub counts_after: Vec<usize>,
    pub imbalance_before: Option<f64>,
    pub imbalance_after: Option<f64>,
    /// Primitives with no positive clip, left out of the weights.
    pub excluded: Vec<String>,
}

/// Filters and rebalances the score records, then holds out a hashed
/// share of the distinct curated clips for validation. Training keeps the
/// resampled multiplicities.
pub fn curate(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<CurationSummary> {
    let records = dataset::read_records(&dataset::scores_path(data))?;
    let entries = dataset::read_index(data)?;
    let cur = curate_records(&records, &cfg.curation)?;
    let selected: Vec<String> = cur.selected.iter().map(|r| r.video_id.clone()).collect();
    let mut distinct: Vec<ClipEntry> = entries
        .iter()
        .filter(|e| selected.contains(&e.video_id))
        .cloned()
        .collect();
    distinct.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if distinct.len() < 2 {
        return Err(Error::Config(format!(
            "curation kept {} distinct clips; at least two are needed",
            distinct.len()
        )));
    }
    let (_, val) = dataset::split(&distinct, cfg.seed, cfg.validation_fraction);
    let validation: Vec<String> = val.iter().map(|e| e.video_id.clone()).collect();
    let train = selected
        .iter()
        .filter(|id| !validation.contains(id))
        .cloned()
        .collect();
    let summary = CurationSummary {
        pool: cur.pool,
        after_quality: cur.after_quality,
        after_reality: cur.after_reality,
        after_richness: cur.after_richness,
        selected,
        train,
        validation,
        imbalance_before: imbalance_ratio(&cur.before),
        imbalance_after: imbalance_ratio(&cur.after),
        counts_before: cur.before,
        counts_after: cur.after,
        excluded: cur
            .irbl
            .excluded()
            .into_iter()
            .map(|k| PRIMITIVES[k].0.to_string())
            .collect(),
    };
    create_dir(out)?;
    write_json(&out.join(CURATED_FILE), &summary)?;
    primitive_chart(
        &out.join("primitive_counts"),
        &summary.counts_before,
        &summary.counts_after,
    )?;
    Ok(summary)
}

/// Before/after label histogram over the primitives.
pub fn primitive_chart(stem: &Path, before: &[usize], after: &[usize]) -> Result<()> {
    let names: Vec<String> = PRIMITIVES.iter().map(|p| p.0.to_string()).collect();
    let as_f = |v: &[usize]| v.iter().map(|&c| Some(c as f64)).collect();
    bar_chart(
        stem,
        Labels {
            title: "primitive label counts",
            x: "primitive",
            y: "clips",
        },
        &names,
        &[
            BarGroup {
                name: "before".into(),
                values: as_f(before),
            },
            BarGroup {
                name: "after".into(),
                values: as_f(after),
            },
        ],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub pool: usize,
    pub after_quality: usize,
    pub after_reality: usize,
    pub after_richness: usize,
    pub selected: usize,
    pub counts_before: Vec<usize>,
    pub counts_after: Vec<usize>,
    pub imbalance_before: Option<f64>,
    pub imbalance_after: Option<f64>,
    pub excluded: Vec<String>,
}

/// Curates an arbitrary score file. Writes the selected records to
/// `<report>.ndjson`, the funnel and histograms to `<report>.json` and the
/// histogram chart to `<report>.svg` / `<report>.png`.
pub fn curate_file(input: &Path, cfg: &CurationConfig, report: &Path) -> Result<CurationReport> {
    let records = dataset::read_records(input)?;
    let cur = curate_records(&records, cfg)?;
    let with_ext = |ext: &str| {
        let mut p = report.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dataset::write_records(&with_ext(".ndjson"), &cur.selected)?;
    let summary = CurationReport {
        pool: cur.pool,
        after_quality: cur.after_quality,
        after_reality: cur.after_reality,
        after_richness: cur.after_richness,
        selected: cur.selected.len(),
        imbalance_before: imbalance_ratio(&cur.before),
        imbalance_after: imbalance_ratio(&cur.after),
        excluded: cur
            .irbl
            .excluded()
            .into_iter()
            .map(|k| PRIMITIVES[k].0.to_string())
            .collect(),
        counts_before: cur.before,
        counts_after: cur.after,
    };
    write_json(&with_ext(".json"), &summary)?;
    primitive_chart(report, &summary.counts_before, &summary.counts_after)?;
    Ok(summary)
}

/// Train and validation clips resolved against the dataset index.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<ClipEntry>,
    pub validation: Vec<ClipEntry>,
}

pub fn read_split(data: &Path, curation: &Path) -> Result<Split> {
    let path = curation.join(CURATED_FILE);
    let summary: CurationSummary = read_json(&path)?;
    let index: BTreeMap<String, SceneClass> = dataset::read_index(data)?
        .into_iter()
        .map(|e| (e.video_id, e.class))
        .collect();
    let resolve = |ids: &[String]| -> Result<Vec<ClipEntry>> {
        ids.iter()
            .map(|id| {
                let class = *index
                    .get(id)
                    .ok_or_else(|| Error::format(&path, format!("unknown clip {id}")))?;
                Ok(ClipEntry {
                    video_id: id.clone(),
                    class,
                })
            })
            .collect()
    };
    Ok(Split {
        train: resolve(&summary.train)?,
        validation: resolve(&summary.validation)?,
    })
}

/// Latents for both sides of the split.
pub fn load_split(
    cfg: &ExperimentConfig,
    data: &Path,
    percep: &Path,
    split: &Split,
) -> Result<(Vec<JointExample>, Vec<JointExample>)> {
    let train = dataset::load_examples(data, percep, &split.train, &cfg.codec)?;
    let val = dataset::load_examples(data, percep, &split.validation, &cfg.codec)?;
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub train_clips: usize,
    pub final_loss: Option<f64>,
    /// Means of the first and last `window` step losses.
    pub window: usize,
    pub head_mean: Option<f64>,
    pub tail_mean: Option<f64>,
    /// `1 - tail / head`.
    pub relative_drop: Option<f64>,
}

impl TrainSummary {
    pub fn new(logs: &[StepLog], train_clips: usize) -> Self {
        let losses: Vec<f64> = logs.iter().map(|l| l.loss).collect();
        let window = LOSS_WINDOW.min(losses.len());
        let means = window_means(&losses, window);
        Self {
            steps: logs.len(),
            train_clips,
            final_loss: losses.last().copied(),
            window,
            head_mean: means.map(|m| m.0),
            tail_mean: means.map(|m| m.1),
            relative_drop: means.map(|(h, t)| 1.0 - t / h),
        }
    }
}

/// Writes `log.ndjson`, `summary.json` and a `loss` chart of the total and
/// each named part.
pub fn write_training_record(
    out: &Path,
    logs: &[StepLog],
    parts: &[&str],
    train_clips: usize,
    title: &str,
) -> Result<TrainSummary> {
    let path = out.join("log.ndjson");
    let mut buf = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut buf, l).map_err(|e| Error::format(&path, e))?;
        buf.push(b'\n');
    }
    write_atomic(&path, &buf)?;
    let summary = TrainSummary::new(logs, train_clips);
    write_json(&out.join("summary.json"), &summary)?;
    let mut series = vec![Series {
        name: "total".into(),
        points: logs.iter().map(|l| (l.step as f64, l.loss)).collect(),
    }];
    for (k, name) in parts.iter().enumerate() {
        series.push(Series {
            name: name.to_string(),
            points: logs
                .iter()
                .filter_map(|l| l.parts.get(k).map(|&v| (l.step as f64, v)))
                .collect(),
        });
    }
    line_chart(
        &out.join("loss"),
        Labels {
            title,
            x: "step",
            y: "loss",
        },
        &series,
    )?;
    Ok(summary)
}

/// Stage I for the given architecture. Periodic checkpoints follow
/// `stage1.checkpoint_every`; the final weights go to `teacher.ckpt`.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    arch: Arch,
    data: &[JointExample],
    out: &Path,
) -> Result<(Teacher, TrainSummary)> {
    create_dir(out)?;
    let tcfg = cfg.teacher_config(arch);
    let mut teacher = Teacher::new(&tcfg)?;
    let every = cfg.stage1.checkpoint_every;
    let mut failure = None;
    let logs = stage1_train(&mut teacher, data, &cfg.stage1.train, |log, t| {
        if every > 0 && (log.step + 1) % every == 0 {
            if let Err(e) = save_teacher(
                &out.join(format!("ckpt-{:06}.ckpt", log.step + 1)),
                &tcfg,
                t,
                log.step + 1,
            ) {
                failure = Some(e);
                return Err(physjoint_core::Error::Config(
                    "checkpoint write failed".into(),
                ));
            }
        }
        Ok(())
    });
    let logs = match (logs, failure) {
        (_, Some(e)) => return Err(e),
        (l, None) => l?,
    };
    save_teacher(&out.join(TEACHER_FILE), &tcfg, &teacher, logs.len())?;
    let summary = write_training_record(
        out,
        &logs,
        &["rgb", "percep"],
        data.len(),
        &format!("stage I ({})", arch.name()),
    )?;
    Ok((teacher, summary))
}

pub fn read_teacher(dir: &Path) -> Result<Teacher> {
    Ok(load_teacher(&dir.join(TEACHER_FILE))?.0)
}

pub fn parallel(teacher: &Teacher) -> Result<&ParallelTeacher> {
    match teacher {
        Teacher::Parallel(t) => Ok(t),
        other => Err(Error::Config(format!(
            "distillation needs the parallel teacher, found {}",
            other.arch().name()
        ))),
    }
}

/// Stage II from a parallel teacher; the exported student goes to
/// `student.ckpt`.
pub fn distill(
    cfg: &ExperimentConfig,
    teacher: &Teacher,
    data: &[JointExample],
    out: &Path,
) -> Result<(SingleStream, TrainSummary)> {
    let teacher = parallel(teacher)?;
    create_dir(out)?;
    let mut distiller = Distiller::from_teacher(teacher, cfg.seed)?;
    let logs = stage2_train(&mut distiller, teacher, data, &cfg.distill, |_, _| Ok(()))?;
    let student = distiller.export_student();
    save_single(&out.join(STUDENT_FILE), STUDENT, &student, logs.len())?;
    let summary = write_training_record(
        out,
        &logs,
        &["diffusion", "distill"],
        data.len(),
        "stage II",
    )?;
    Ok((student, summary))
}

/// A single-stream model trained on the RGB latents alone for the stage I
/// step budget.
pub fn train_baseline(
    cfg: &ExperimentConfig,
    data: &[JointExample],
    out: &Path,
) -> Result<(SingleStream, TrainSummary)> {
    create_dir(out)?;
    let mut model = SingleStream::new(&cfg.backbone())?;
    let latents: Vec<LatentExample> = data
        .iter()
        .map(|e| LatentExample {
            latent: e.rgb.clone(),
            class: e.class,
        })
        .collect();
    let mut obj = SingleObjective {
        model: &mut model,
        data: &latents,
    };
    let logs = train(&mut obj, &cfg.stage1.train, |_, _| Ok(()))?;
    save_single(&out.join(BASELINE_FILE), BASELINE, &model, logs.len())?;
    let summary = write_training_record(out, &logs, &["rgb"], data.len(), "baseline")?;
    Ok((model, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub dir: String,
    pub class: SceneClass,
    pub seed: u64,
}

pub fn write_samples(out: &Path, samples: &[Labeled], seed: u64) -> Result<()> {
    create_dir(out)?;
    let mut index = Vec::with_capacity(samples.len());
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, s) in samples.iter().enumerate() {
        let n = seen.entry(s.class.index()).or_default();
        let dir = format!("{}-{:03}", s.class.name(), n);
        *n += 1;
        write_frames(&out.join(&dir), &s.clip)?;
        index.push(SampleEntry {
            dir,
            class: s.class,
            seed: seed.wrapping_add(k as u64),
        });
    }
    write_json(&out.join(SAMPLE_INDEX), &index)
}

pub fn read_samples(dir: &Path) -> Result<Vec<Labeled>> {
    let index: Vec<SampleEntry> = read_json(&dir.join(SAMPLE_INDEX))?;
    index
        .into_iter()
        .map(|e| {
            Ok(Labeled {
                class: e.class,
                clip: read_frames(&dir.join(&e.dir))?,
            })
        })
        .collect()
}

pub fn sample_student(cfg: &ExperimentConfig, student_dir: &Path, out: &Path) -> Result<()> {
    let student = load_single(&student_dir.join(STUDENT_FILE), STUDENT)?;
    let s = &cfg.sample;
    let shape = cfg.latent_shape()?;
    let samples = eval::sample_single(
        &student,
        &cfg.codec,
        &shape,
        &s.sampler,
        &cfg.world.classes,
        s.per_class,
        s.seed,
    )?;
    write_samples(out, &samples, s.seed)
}

/// Every dataset clip read back from its RGB frames.
pub fn reference_clips(data: &Path) -> Result<Vec<Labeled>> {
    dataset::read_index(data)?
        .into_iter()
        .map(|e| {
            Ok(Labeled {
                class: e.class,
                clip: read_frames(&clip_dir(data, &e.video_id).join(RGB_DIR))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPcRow {
    pub variant: String,
    pub samples: usize,
    pub penetration_rate: f64,
    pub count_stability: f64,
    pub smoothness: f64,
}

impl ToyPcRow {
    pub fn new(variant: &str, samples: usize, m: SampleReport) -> Self {
        Self {
            variant: variant.into(),
            samples,
            penetration_rate: m.penetration_rate,
            count_stability: m.count_stability,
            smoothness: m.smoothness,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub validation_clips: usize,
    /// Single-stream model trained on RGB alone with the stage I budget.
    pub baseline: ValLoss,
    pub teacher: ValLoss,
    pub teacher_no_links: ValLoss,
    pub student: ValLoss,
    pub toypc: Vec<ToyPcRow>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)
}

pub fn toypc_chart(stem: &Path, rows: &[ToyPcRow]) -> Result<()> {
    let cats = vec![
        "penetration rate".to_string(),
        "count stability".to_string(),
        "smoothness (px)".to_string(),
    ];
    let groups: Vec<BarGroup> = rows
        .iter()
        .map(|r| BarGroup {
            name: r.variant.clone(),
            values: vec![
                Some(r.penetration_rate),
                Some(r.count_stability),
                Some(r.smoothness),
            ],
        })
        .collect();
    bar_chart(
        stem,
        Labels {
            title: "toy physics proxy",
            x: "",
            y: "value",
        },
        &cats,
        &groups,
    )
}

/// Held-out losses for an RGB-only baseline, the teacher, its link-free RGB
/// branch and the student, plus ToyPC on reference clips, student and
/// baseline samples, and noise. The baseline is trained here, under
/// `out/baseline`.
pub fn evaluate(cfg: &ExperimentConfig, dirs: &EvalInputs, out: &Path) -> Result<EvalReport> {
    let split = read_split(dirs.data, dirs.curation)?;
    let (train, val) = load_split(cfg, dirs.data, dirs.percep, &split)?;
    let teacher = read_teacher(dirs.teacher)?;
    let student = load_single(&dirs.student.join(STUDENT_FILE), STUDENT)?;
    create_dir(out)?;
    let (baseline, _) = train_baseline(cfg, &train, &out.join("baseline"))?;
    let seed = val_seed(cfg);
    let report_baseline = eval::validation_loss(Scored::Single(&baseline), &val, VAL_DRAWS, seed)?;
    let report_teacher = eval::validation_loss(Scored::Joint(&teacher), &val, VAL_DRAWS, seed)?;
    let report_branch = eval::validation_loss(
        Scored::RgbBranch(parallel(&teacher)?),
        &val,
        VAL_DRAWS,
        seed,
    )?;
    let report_student = eval::validation_loss(Scored::Single(&student), &val, VAL_DRAWS, seed)?;

    let camera = eval::world_camera(cfg.world.frames, cfg.world.size);
    let det = &cfg.detector;
    let reference = reference_clips(dirs.data)?;
    let generated = read_samples(dirs.samples)?;
    let s = &cfg.sample;
    let from_baseline = eval::sample_single(
        &baseline,
        &cfg.codec,
        &cfg.latent_shape()?,
        &s.sampler,
        &cfg.world.classes,
        s.per_class,
        s.seed,
    )?;
    let noise = eval::noise_set(
        &cfg.world.classes,
        s.per_class,
        cfg.world.frames,
        cfg.world.size,
        cfg.seed,
    )?;
    let toypc = vec![
        ToyPcRow::new(
            "ground_truth",
            reference.len(),
            eval::score(&reference, &camera, det).mean,
        ),
        ToyPcRow::new(
            "student",
            generated.len(),
            eval::score(&generated, &camera, det).mean,
        ),
        ToyPcRow::new(
            "baseline",
            from_baseline.len(),
            eval::score(&from_baseline, &camera, det).mean,
        ),
        ToyPcRow::new("noise", noise.len(), eval::score(&noise, &camera, det).mean),
    ];
    write_csv(&out.join("toypc.csv"), &toypc)?;
    toypc_chart(&out.join("toypc"), &toypc)?;
    let report = EvalReport {
        validation_clips: val.len(),
        baseline: report_baseline,
        teacher: report_teacher,
        teacher_no_links: report_branch,
        student: report_student,
        toypc,
    };
    let cats: Vec<String> = ["baseline", "teacher", "teacher-no-links", "student"]
        .map(String::from)
        .to_vec();
    bar_chart(
        &out.join("val_loss"),
        Labels {
            title: "validation loss (RGB)",
            x: "",
            y: "mse",
        },
        &cats,
        &[BarGroup {
            name: "rgb".into(),
            values: [
                &report.baseline,
                &report.teacher,
                &report.teacher_no_links,
                &report.student,
            ]
            .map(|v| Some(v.rgb))
            .to_vec(),
        }],
    )?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Stage folders read by [`evaluate`].
pub struct EvalInputs<'a> {
    pub data: &'a Path,
    pub percep: &'a Path,
    pub curation: &'a Path,
    pub teacher: &'a Path,
    pub student: &'a Path,
    pub samples: &'a Path,
}
