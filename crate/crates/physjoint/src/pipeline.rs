//! Ordered, resumable stages with a hash manifest.
//!
//! Each stage owns one folder under the run directory. After a stage
//! succeeds, `manifest.json` records a hash of the config slice it reads,
//! hashes of the folders it consumes and a hash of what it wrote. A stage
//! whose record still matches is skipped on the next run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{hash_tree, read_json, sha256_hex, write_atomic, write_json};
use crate::stages::{self, EvalInputs};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    EncodePercep,
    Curate,
    TrainTeacher,
    Distill,
    Sample,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::EncodePercep,
        Stage::Curate,
        Stage::TrainTeacher,
        Stage::Distill,
        Stage::Sample,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::EncodePercep => "encode-percep",
            Stage::Curate => "curate",
            Stage::TrainTeacher => "train-teacher",
            Stage::Distill => "distill",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Output folder, relative to the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::EncodePercep => "percep",
            Stage::Curate => "curation",
            Stage::TrainTeacher => "teacher",
            Stage::Distill => "student",
            Stage::Sample => "samples",
            Stage::Evaluate => "eval",
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenData => &[],
            EncodePercep | Curate => &[GenData],
            TrainTeacher => &[GenData, EncodePercep, Curate],
            Distill => &[GenData, EncodePercep, Curate, TrainTeacher],
            Sample => &[Distill],
            Evaluate => &[GenData, EncodePercep, Curate, TrainTeacher, Distill, Sample],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config_hash: String,
    /// Folder name to content hash.
    pub input_hashes: BTreeMap<String, String>,
    pub output_hash: String,
    pub duration_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn put(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Up to date with its recorded inputs.
    Skipped,
    /// Before `--skip-to`; not checked or touched.
    Untouched,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub skip_to: Option<Stage>,
    /// Rerun stages even when their records match.
    pub force: bool,
}

fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serialises"))
}

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        Ok(Self { cfg, dir })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.dir())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let m: Manifest = read_json(&path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(&path, "unsupported manifest version"));
        }
        Ok(Some(m))
    }

    /// Hash of the part of the config `stage` reads.
    pub fn stage_config_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let v = match stage {
            Stage::GenData => serde_json::json!([c.seed, c.world]),
            Stage::EncodePercep => serde_json::json!([c.percep_config(c.modality)]),
            Stage::Curate => serde_json::json!([c.seed, c.validation_fraction, c.curation]),
            Stage::TrainTeacher => serde_json::json!([c.codec, c.teacher_config(c.arch), c.stage1]),
            Stage::Distill => serde_json::json!([c.seed, c.codec, c.distill]),
            Stage::Sample => serde_json::json!([
                c.codec,
                c.world.classes,
                c.world.frames,
                c.world.size,
                c.sample
            ]),
            Stage::Evaluate => serde_json::json!([
                c.seed,
                c.codec,
                c.backbone(),
                c.stage1,
                c.detector,
                c.sample
            ]),
        };
        hash_json(&v)
    }

    fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for &dep in stage.inputs() {
            let path = self.stage_dir(dep);
            if !path.is_dir() {
                return Err(Error::format(&path, format!("missing; run {dep} first")));
            }
            out.insert(dep.dir().to_string(), hash_tree(&self.dir, &[path])?);
        }
        Ok(out)
    }

    fn output_hash(&self, stage: Stage) -> Result<String> {
        hash_tree(&self.dir, &[self.stage_dir(stage)])
    }

    /// Whether the recorded run of `stage` still matches config, inputs and
    /// outputs on disk.
    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let Some(m) = self.read_manifest()? else {
            return Ok(false);
        };
        let Some(rec) = m.get(stage) else {
            return Ok(false);
        };
        if rec.config_hash != self.stage_config_hash(stage) || !self.stage_dir(stage).is_dir() {
            return Ok(false);
        }
        Ok(
            self.input_hashes(stage).ok().as_ref() == Some(&rec.input_hashes)
                && self.output_hash(stage)? == rec.output_hash,
        )
    }

    /// Runs one stage unless it is current. Failures carry the stage name;
    /// whatever the stage wrote before failing is left in place.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<Outcome> {
        self.run_stage_inner(stage, force)
            .map_err(|e| Error::Stage {
                stage: stage.name(),
                source: Box::new(e),
            })
    }

    fn run_stage_inner(&self, stage: Stage, force: bool) -> Result<Outcome> {
        write_atomic(&self.dir.join("config.toml"), self.cfg.to_toml().as_bytes())?;
        if !force && self.is_current(stage)? {
            return Ok(Outcome::Skipped);
        }
        let inputs = self.input_hashes(stage)?;
        let out = self.stage_dir(stage);
        if out.exists() {
            std::fs::remove_dir_all(&out).map_err(Error::io(&out))?;
        }
        let start = Instant::now();
        self.execute(stage, &out)?;
        let rec = StageRecord {
            stage,
            config_hash: self.stage_config_hash(stage),
            input_hashes: inputs,
            output_hash: self.output_hash(stage)?,
            duration_secs: start.elapsed().as_secs_f64(),
        };
        let mut manifest = self.read_manifest()?.unwrap_or_else(|| Manifest {
            format_version: MANIFEST_VERSION,
            config_hash: String::new(),
            config: self.cfg.clone(),
            stages: Vec::new(),
        });
        manifest.config_hash = hash_json(&self.cfg);
        manifest.config = self.cfg.clone();
        manifest.put(rec);
        write_json(&self.manifest_path(), &manifest)?;
        Ok(Outcome::Ran)
    }

    fn execute(&self, stage: Stage, out: &Path) -> Result<()> {
        let c = &self.cfg;
        let d = |s: Stage| self.stage_dir(s);
        match stage {
            Stage::GenData => stages::gen_data(c, out),
            Stage::EncodePercep => stages::encode_percep(c, c.modality, &d(Stage::GenData), out),
            Stage::Curate => stages::curate(c, &d(Stage::GenData), out).map(drop),
            Stage::TrainTeacher => {
                let split = stages::read_split(&d(Stage::GenData), &d(Stage::Curate))?;
                let (train, _) =
                    stages::load_split(c, &d(Stage::GenData), &d(Stage::EncodePercep), &split)?;
                stages::train_teacher(c, c.arch, &train, out).map(drop)
            }
            Stage::Distill => {
                let split = stages::read_split(&d(Stage::GenData), &d(Stage::Curate))?;
                let (train, _) =
                    stages::load_split(c, &d(Stage::GenData), &d(Stage::EncodePercep), &split)?;
                let teacher = stages::read_teacher(&d(Stage::TrainTeacher))?;
                stages::distill(c, &teacher, &train, out).map(drop)
            }
            Stage::Sample => stages::sample_student(c, &d(Stage::Distill), out),
            Stage::Evaluate => {
                let dirs = EvalInputs {
                    data: &d(Stage::GenData),
                    percep: &d(Stage::EncodePercep),
                    curation: &d(Stage::Curate),
                    teacher: &d(Stage::TrainTeacher),
                    student: &d(Stage::Distill),
                    samples: &d(Stage::Sample),
                };
                stages::evaluate(c, &dirs, out).map(drop)
            }
        }
    }

    /// All stages in order. Stages before `skip_to` are left alone; later
    /// ones run unless current (or always with `force`).
    pub fn run_pipeline(
        &self,
        opts: RunOptions,
        mut on_stage: impl FnMut(Stage, Outcome),
    ) -> Result<Vec<(Stage, Outcome)>> {
        let mut done = Vec::with_capacity(Stage::ALL.len());
        for stage in Stage::ALL {
            let outcome = if opts.skip_to.is_some_and(|s| stage < s) {
                Outcome::Untouched
            } else {
                self.run_stage(stage, opts.force)?
            };
            on_stage(stage, outcome);
            done.push((stage, outcome));
        }
        Ok(done)
    }
}
