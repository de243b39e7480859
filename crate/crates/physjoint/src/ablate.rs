//! Ablation sweeps over one axis at a time. Every row trains on the same
//! curated clips with the same step budget and seeds; a row that fails is
//! kept in the table with its error.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use physjoint_core::bct::{Arch, JointExample, RgbBranch, Teacher};
use physjoint_core::toypc::ToyPcReport;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Modality};
use crate::error::{Error, Result};
use crate::eval::{self, Labeled, Scored, ValLoss};
use crate::io::{create_dir, write_json};
use crate::pipeline::{Run, Stage};
use crate::plot::{bar_chart, BarGroup, Labels};
use crate::stages::{self, write_csv, TrainSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Arch,
    Modality,
    Distill,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Arch, Axis::Modality, Axis::Distill];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Arch => "arch",
            Axis::Modality => "modality",
            Axis::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The declared row set, in table order.
    pub fn rows(self) -> &'static [&'static str] {
        match self {
            Axis::Arch => &["parallel", "channel", "spatial"],
            Axis::Modality => &["seg", "xyz", "tracks", "unified"],
            Axis::Distill => &["baseline", "teacher", "teacher-no-links", "student"],
        }
    }

    /// What `val_loss` holds for this axis.
    pub fn metric(self) -> &'static str {
        match self {
            Axis::Arch | Axis::Modality => "joint validation loss",
            Axis::Distill => "RGB validation loss",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub status: String,
    /// Optimiser steps behind this row, over all stages it depends on.
    pub steps: usize,
    pub train_clips: usize,
    pub val_loss: Option<f64>,
    pub val_rgb: Option<f64>,
    pub val_percep: Option<f64>,
    pub penetration_rate: Option<f64>,
    pub count_stability: Option<f64>,
    pub smoothness: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    fn ok(
        row: &str,
        steps: usize,
        train_clips: usize,
        val: ValLoss,
        axis: Axis,
        toypc: &ToyPcReport,
    ) -> Self {
        Self {
            row: row.into(),
            status: "ok".into(),
            steps,
            train_clips,
            val_loss: match axis {
                Axis::Distill => Some(val.rgb),
                _ => val.joint,
            },
            val_rgb: Some(val.rgb),
            val_percep: val.percep,
            penetration_rate: Some(toypc.mean.penetration_rate),
            count_stability: Some(toypc.mean.count_stability),
            smoothness: Some(toypc.mean.smoothness),
            error: None,
        }
    }

    fn failed(row: &str, error: String) -> Self {
        Self {
            row: row.into(),
            status: "failed".into(),
            steps: 0,
            train_clips: 0,
            val_loss: None,
            val_rgb: None,
            val_percep: None,
            penetration_rate: None,
            count_stability: None,
            smoothness: None,
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub metric: String,
    pub rows: Vec<AblationRow>,
    /// Which row has the lowest `val_loss`, reported rather than required.
    pub best: Option<String>,
}

impl AblationTable {
    pub fn row_names(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.row.as_str()).collect()
    }
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    train: Vec<JointExample>,
    val: Vec<JointExample>,
}

impl Shared<'_> {
    fn toypc(&self, samples: &[Labeled]) -> ToyPcReport {
        let camera = eval::world_camera(self.cfg.world.frames, self.cfg.world.size);
        eval::score(samples, &camera, &self.cfg.detector)
    }

    fn teacher_samples(&self, teacher: &Teacher) -> Result<Vec<Labeled>> {
        let c = self.cfg;
        eval::sample_teacher_rgb(
            teacher,
            &c.codec,
            &c.latent_shape()?,
            &c.sample.sampler,
            &c.world.classes,
            c.sample.per_class,
            c.sample.seed,
        )
    }

    fn single_samples<D: physjoint_core::sampler::Denoiser>(
        &self,
        model: &D,
    ) -> Result<Vec<Labeled>> {
        let c = self.cfg;
        eval::sample_single(
            model,
            &c.codec,
            &c.latent_shape()?,
            &c.sample.sampler,
            &c.world.classes,
            c.sample.per_class,
            c.sample.seed,
        )
    }

    fn val(&self, model: Scored, val: &[JointExample]) -> Result<ValLoss> {
        eval::validation_loss(model, val, stages::VAL_DRAWS, stages::val_seed(self.cfg))
    }

    /// Trains a teacher and scores it on joint loss and RGB samples.
    fn teacher_row(
        &self,
        axis: Axis,
        row: &str,
        arch: Arch,
        train: &[JointExample],
        val: &[JointExample],
        out: &Path,
    ) -> Result<AblationRow> {
        let (teacher, summary) = stages::train_teacher(self.cfg, arch, train, out)?;
        let v = self.val(Scored::Joint(&teacher), val)?;
        let t = self.toypc(&self.teacher_samples(&teacher)?);
        Ok(AblationRow::ok(
            row,
            summary.steps,
            train.len(),
            v,
            axis,
            &t,
        ))
    }
}

fn guarded<F: FnOnce() -> Result<AblationRow>>(row: &str, f: F) -> AblationRow {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => AblationRow::failed(row, e.to_string()),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            AblationRow::failed(row, format!("panicked: {}", msg.unwrap_or_default()))
        }
    }
}

/// Runs every declared row of `axis` and writes `table.csv`, `table.json`
/// and charts under `<run>/ablate/<axis>/`. The shared dataset stages run
/// (or are reused) first.
pub fn ablate(
    run: &Run,
    axis: Axis,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    for stage in [Stage::GenData, Stage::EncodePercep, Stage::Curate] {
        run.run_stage(stage, false)?;
    }
    let cfg = &run.cfg;
    let data = run.stage_dir(Stage::GenData);
    let out = run.dir.join("ablate").join(axis.name());
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(Error::io(&out))?;
    }
    create_dir(&out)?;
    let split = stages::read_split(&data, &run.stage_dir(Stage::Curate))?;
    let (train, val) = stages::load_split(cfg, &data, &run.stage_dir(Stage::EncodePercep), &split)?;
    let shared = Shared { cfg, train, val };

    let mut rows = Vec::with_capacity(axis.rows().len());
    let mut push = |r: AblationRow| {
        on_row(&r);
        rows.push(r);
    };
    match axis {
        Axis::Arch => {
            for &name in axis.rows() {
                let arch = Arch::parse(name).expect("declared arch row");
                push(guarded(name, || {
                    shared.teacher_row(
                        axis,
                        name,
                        arch,
                        &shared.train,
                        &shared.val,
                        &out.join(name),
                    )
                }));
            }
        }
        Axis::Modality => {
            for &name in axis.rows() {
                let m = Modality::ALL
                    .into_iter()
                    .find(|m| m.name() == name)
                    .expect("declared modality row");
                push(guarded(name, || {
                    let percep = out.join(format!("percep-{name}"));
                    stages::encode_percep(cfg, m, &data, &percep)?;
                    let (train, val) = stages::load_split(cfg, &data, &percep, &split)?;
                    shared.teacher_row(axis, name, Arch::Parallel, &train, &val, &out.join(name))
                }));
            }
        }
        Axis::Distill => {
            push(guarded("baseline", || {
                let (model, s) = stages::train_baseline(cfg, &shared.train, &out.join("baseline"))?;
                let v = shared.val(Scored::Single(&model), &shared.val)?;
                Ok(AblationRow::ok(
                    "baseline",
                    s.steps,
                    s.train_clips,
                    v,
                    axis,
                    &shared.toypc(&shared.single_samples(&model)?),
                ))
            }));
            let trained = catch_unwind(AssertUnwindSafe(|| {
                stages::train_teacher(cfg, Arch::Parallel, &shared.train, &out.join("teacher"))
            }));
            let trained: std::result::Result<(Teacher, TrainSummary), String> = match trained {
                Ok(Ok(t)) => Ok(t),
                Ok(Err(e)) => Err(e.to_string()),
                Err(_) => Err("teacher training panicked".into()),
            };
            match &trained {
                Err(e) => {
                    for &name in &axis.rows()[1..] {
                        push(AblationRow::failed(
                            name,
                            format!("teacher training failed: {e}"),
                        ));
                    }
                }
                Ok((teacher, s)) => {
                    push(guarded("teacher", || {
                        let v = shared.val(Scored::Joint(teacher), &shared.val)?;
                        Ok(AblationRow::ok(
                            "teacher",
                            s.steps,
                            s.train_clips,
                            v,
                            axis,
                            &shared.toypc(&shared.teacher_samples(teacher)?),
                        ))
                    }));
                    push(guarded("teacher-no-links", || {
                        let p = stages::parallel(teacher)?;
                        let v = shared.val(Scored::RgbBranch(p), &shared.val)?;
                        let samples = shared.single_samples(&RgbBranch(p))?;
                        Ok(AblationRow::ok(
                            "teacher-no-links",
                            s.steps,
                            s.train_clips,
                            v,
                            axis,
                            &shared.toypc(&samples),
                        ))
                    }));
                    push(guarded("student", || {
                        let (student, d) =
                            stages::distill(cfg, teacher, &shared.train, &out.join("student"))?;
                        let v = shared.val(Scored::Single(&student), &shared.val)?;
                        let t = shared.toypc(&shared.single_samples(&student)?);
                        Ok(AblationRow::ok(
                            "student",
                            s.steps + d.steps,
                            d.train_clips,
                            v,
                            axis,
                            &t,
                        ))
                    }));
                }
            }
        }
    }

    let best = rows
        .iter()
        .filter_map(|r| {
            r.val_loss
                .filter(|v| v.is_finite())
                .map(|v| (v, r.row.clone()))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|b| b.1);
    let table = AblationTable {
        axis,
        metric: axis.metric().into(),
        rows,
        best,
    };
    write_table(&out, &table)?;
    Ok(table)
}

fn write_table(out: &Path, table: &AblationTable) -> Result<()> {
    write_csv(&out.join("table.csv"), &table.rows)?;
    write_json(&out.join("table.json"), table)?;
    let names: Vec<String> = table.rows.iter().map(|r| r.row.clone()).collect();
    let title = format!("{} ablation", table.axis);
    bar_chart(
        &out.join("val_loss"),
        Labels {
            title: &title,
            x: "",
            y: &table.metric,
        },
        &names,
        &[BarGroup {
            name: table.metric.clone(),
            values: table.rows.iter().map(|r| r.val_loss).collect(),
        }],
    )?;
    bar_chart(
        &out.join("toypc"),
        Labels {
            title: &format!("{title}: toy physics proxy"),
            x: "",
            y: "rate",
        },
        &names,
        &[
            BarGroup {
                name: "penetration rate".into(),
                values: table.rows.iter().map(|r| r.penetration_rate).collect(),
            },
            BarGroup {
                name: "count stability".into(),
                values: table.rows.iter().map(|r| r.count_stability).collect(),
            },
        ],
    )
}
