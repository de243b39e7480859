//! Experiment configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use physjoint_core::bct::{Arch, TeacherConfig};
use physjoint_core::codec::CodecConfig;
use physjoint_core::curation::CurationConfig;
use physjoint_core::distill::DistillConfig;
use physjoint_core::dit::BackboneConfig;
use physjoint_core::percep::PercepConfig;
use physjoint_core::sampler::SamplerConfig;
use physjoint_core::toypc::DetectorConfig;
use physjoint_core::train::TrainConfig;
use physjoint_core::video::LayerSet;
use physjoint_core::world::SceneClass;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Overrides `output_root` when set.
pub const OUTPUT_ROOT_ENV: &str = "PHYSJOINT_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Seg,
    Xyz,
    Tracks,
    Unified,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Seg,
        Modality::Xyz,
        Modality::Tracks,
        Modality::Unified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Seg => "seg",
            Modality::Xyz => "xyz",
            Modality::Tracks => "tracks",
            Modality::Unified => "unified",
        }
    }

    pub fn layers(self) -> LayerSet {
        match self {
            Modality::Seg => LayerSet::SEGMENTATION,
            Modality::Xyz => LayerSet::POINTMAP,
            Modality::Tracks => LayerSet::TRACKS,
            Modality::Unified => LayerSet::UNIFIED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub clips: usize,
    pub frames: usize,
    /// Square frame side in pixels.
    pub size: usize,
    /// Classes cycled over clip indices.
    pub classes: Vec<SceneClass>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            clips: 32,
            frames: 8,
            size: 16,
            classes: SceneClass::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub link_blocks: Option<Vec<usize>>,
    pub pre_links: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            link_blocks: None,
            pre_links: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Write `ckpt-<step>` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub per_class: usize,
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            per_class: 2,
            sampler: SamplerConfig {
                steps: 20,
                guidance: 1.0,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_root: PathBuf,
    pub modality: Modality,
    pub arch: Arch,
    /// Share of clips held out for validation, chosen by a hash of the id.
    pub validation_fraction: f64,
    pub world: WorldConfig,
    pub percep: PercepConfig,
    pub codec: CodecConfig,
    /// `latent_channels` is always taken from the codec.
    pub backbone: BackboneConfig,
    pub teacher: LinkConfig,
    pub stage1: Stage1Config,
    pub distill: DistillConfig,
    pub curation: CurationConfig,
    pub sample: SampleConfig,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            output_root: PathBuf::from("runs"),
            modality: Modality::Unified,
            arch: Arch::Parallel,
            validation_fraction: 0.1,
            world: WorldConfig::default(),
            percep: PercepConfig::default(),
            codec: CodecConfig::default(),
            backbone: BackboneConfig {
                width: 64,
                heads: 4,
                depth: 8,
                freq_dim: 32,
                ..Default::default()
            },
            teacher: LinkConfig::default(),
            stage1: Stage1Config::default(),
            distill: DistillConfig::default(),
            // Thermal and optical primitives never fire in the synthetic
            // world, which caps the domain-averaged richness well below 2.
            curation: CurationConfig {
                richness_min: 1.15,
                with_replacement: true,
                ..Default::default()
            },
            sample: SampleConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config. Keys left out keep the values of
    /// [`ExperimentConfig::default`], including inside partially given
    /// tables, so e.g. `[distill.train] steps = 50` keeps the distillation
    /// learning rate rather than the generic training default.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("default config serialises");
        overlay(&mut merged, user.clone());
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // Flattened tables cannot deny unknown fields, so look for keys that
        // did not survive the round trip.
        let known = toml::Table::try_from(&cfg).expect("config serialises");
        if let Some(key) = unknown_key(&user, &known, "") {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            latent_channels: self.codec.latent_channels(),
            ..self.backbone.clone()
        }
    }

    pub fn teacher_config(&self, arch: Arch) -> TeacherConfig {
        TeacherConfig {
            backbone: self.backbone(),
            arch,
            link_blocks: self.teacher.link_blocks.clone(),
            pre_links: self.teacher.pre_links,
        }
    }

    pub fn percep_config(&self, modality: Modality) -> PercepConfig {
        PercepConfig {
            layers: modality.layers(),
            ..self.percep.clone()
        }
    }

    pub fn latent_shape(&self) -> Result<[usize; 4]> {
        let w = &self.world;
        Ok(self.codec.latent_shape(w.frames, w.size, w.size)?)
    }

    /// `output_root/name`, with the root taken from [`OUTPUT_ROOT_ENV`] if
    /// that is set.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_root.clone());
        root.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Core(e) => Error::Config(e.to_string()),
            other => other,
        })
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("run name must be a non-empty single path component");
        }
        if self.world.clips < 2
            || self.world.frames == 0
            || self.world.size == 0
            || self.world.classes.is_empty()
        {
            return bad("world needs at least two clips, one frame, a positive size and a class");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        self.codec.validate()?;
        self.backbone().validate()?;
        let shape = self.latent_shape()?;
        physjoint_core::dit::token_grid(&shape, self.backbone.patch)?;
        self.teacher_config(Arch::Parallel).resolved_link_blocks()?;
        if self.stage1.train.batch_size == 0 || self.distill.train.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.distill.lambda >= 0.0 && self.distill.lambda.is_finite()) {
            return bad("distill.lambda must be a finite non-negative number");
        }
        if self.sample.sampler.steps == 0 {
            return bad("sample.steps must be positive");
        }
        if !(self.curation.tau > 1.0 && self.curation.tau <= 5.0) {
            return bad("curation.tau must be in (1, 5]");
        }
        if self.percep.n_points == 0 {
            return bad("percep.n_points must be positive");
        }
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    user.iter().find_map(|(k, v)| {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (known.get(k), v) {
            (None, _) => Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => unknown_key(ut, kt, &path),
            _ => None,
        }
    })
}
