//! On-disk dataset: one directory per clip with `rgb/` frames,
//! `truth.json` and `score.json`, plus `scores.ndjson` and `index.json` at
//! the root. Perception frames live in a separate tree with one folder per
//! clip, so several modality encodings can share one dataset.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use physjoint_core::bct::JointExample;
use physjoint_core::codec::{encode, CodecConfig};
use physjoint_core::curation::ScoreRecord;
use physjoint_core::percep::{encode_percep, PercepConfig};
use physjoint_core::world::{
    clip_id, score_record_from_truth, simulate, BodyTrack, SceneClass, SceneSpec, SceneTruth,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::io::{create_dir, read_frames, read_json, write_atomic, write_frames, write_json};

pub const TRUTH_VERSION: u32 = 1;
pub const RGB_DIR: &str = "rgb";

/// Ground truth as stored in `truth.json`. The scene spec is kept so the
/// pointmap can be re-derived exactly instead of being stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format_version: u32,
    pub video_id: String,
    pub spec: SceneSpec,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per frame, `[label, run]` pairs in row-major pixel order.
    pub masks: Vec<Vec<[u32; 2]>>,
    pub tracks: Vec<BodyTrack>,
    pub physics_labels: Vec<f64>,
}

pub fn rle_encode(labels: &[u16]) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for &v in labels {
        match out.last_mut() {
            Some([l, n]) if *l == v as u32 => *n += 1,
            _ => out.push([v as u32, 1]),
        }
    }
    out
}

pub fn rle_decode(runs: &[[u32; 2]], len: usize) -> Option<Vec<u16>> {
    let mut out = Vec::with_capacity(len);
    for &[l, n] in runs {
        out.extend(std::iter::repeat_n(u16::try_from(l).ok()?, n as usize));
    }
    (out.len() == len).then_some(out)
}

impl TruthFile {
    pub fn new(spec: &SceneSpec, truth: &SceneTruth) -> Self {
        let n = truth.height * truth.width;
        Self {
            format_version: TRUTH_VERSION,
            video_id: clip_id(spec.seed),
            spec: spec.clone(),
            frames: truth.frames,
            height: truth.height,
            width: truth.width,
            masks: truth.masks.chunks(n).map(rle_encode).collect(),
            tracks: truth.tracks.clone(),
            physics_labels: truth.physics_labels.to_vec(),
        }
    }

    pub fn decode_masks(&self) -> Option<Vec<u16>> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.frames * n);
        if self.masks.len() != self.frames {
            return None;
        }
        for runs in &self.masks {
            out.extend(rle_decode(runs, n)?);
        }
        Some(out)
    }

    /// Re-runs the stored scene and checks it reproduces the stored masks.
    pub fn resimulate(&self, path: &Path) -> Result<SceneTruth> {
        if self.format_version != TRUTH_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported truth version {}", self.format_version),
            ));
        }
        let (_, truth) = simulate(&self.spec)?;
        let masks = self
            .decode_masks()
            .ok_or_else(|| Error::format(path, "mask runs do not cover the frames"))?;
        if masks != truth.masks {
            return Err(Error::format(path, "stored masks disagree with the scene"));
        }
        Ok(truth)
    }
}

/// One row of `index.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub video_id: String,
    pub class: SceneClass,
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(index as u64)
}

pub fn clip_dir(data: &Path, video_id: &str) -> PathBuf {
    data.join(video_id)
}

pub fn index_path(data: &Path) -> PathBuf {
    data.join("index.json")
}

pub fn scores_path(data: &Path) -> PathBuf {
    data.join("scores.ndjson")
}

/// Simulates `world.clips` scenes, cycling through the configured classes,
/// and writes RGB frames, truth, score records and the index.
pub fn generate(data: &Path, world: &WorldConfig, seed: u64) -> Result<Vec<ClipEntry>> {
    create_dir(data)?;
    let mut entries = Vec::with_capacity(world.clips);
    let mut records = Vec::with_capacity(world.clips);
    for i in 0..world.clips {
        let class = world.classes[i % world.classes.len()];
        let spec = SceneSpec::random(
            class,
            scene_seed(seed, i),
            world.frames,
            world.size,
            world.size,
        );
        let (rgb, truth) = simulate(&spec)?;
        let file = TruthFile::new(&spec, &truth);
        let dir = clip_dir(data, &file.video_id);
        write_frames(&dir.join(RGB_DIR), &rgb)?;
        write_json(&dir.join("truth.json"), &file)?;
        let record = score_record_from_truth(&truth, &spec);
        write_json(&dir.join("score.json"), &record)?;
        entries.push(ClipEntry {
            video_id: file.video_id,
            class,
        });
        records.push(record);
    }
    write_json(&index_path(data), &entries)?;
    write_records(&scores_path(data), &records)?;
    Ok(entries)
}

pub fn read_index(data: &Path) -> Result<Vec<ClipEntry>> {
    read_json(&index_path(data))
}

pub fn read_truth(data: &Path, video_id: &str) -> Result<TruthFile> {
    read_json(&clip_dir(data, video_id).join("truth.json"))
}

/// Renders perception frames for every clip into `<out>/<video_id>/`.
pub fn encode_percep_all(
    data: &Path,
    entries: &[ClipEntry],
    cfg: &PercepConfig,
    out: &Path,
) -> Result<()> {
    for e in entries {
        let path = clip_dir(data, &e.video_id).join("truth.json");
        let file: TruthFile = read_json(&path)?;
        let truth = file.resimulate(&path)?;
        let clip_cfg = PercepConfig {
            seed: cfg.seed ^ file.spec.seed,
            ..cfg.clone()
        };
        let render = encode_percep(&truth, &file.spec.camera, &clip_cfg)?;
        write_frames(&out.join(&e.video_id), &render.clip.video)?;
    }
    Ok(())
}

/// Paired latents for the given clips, read back from the PNG frames.
pub fn load_examples(
    data: &Path,
    percep: &Path,
    entries: &[ClipEntry],
    codec: &CodecConfig,
) -> Result<Vec<JointExample>> {
    entries
        .iter()
        .map(|e| {
            let rgb = read_frames(&clip_dir(data, &e.video_id).join(RGB_DIR))?;
            let dir = percep.join(&e.video_id);
            let p = read_frames(&dir)?;
            if p.shape() != rgb.shape() {
                return Err(Error::format(
                    &dir,
                    "perception frames differ in shape from RGB",
                ));
            }
            Ok(JointExample {
                rgb: encode(codec, &rgb)?.into_tensor(),
                percep: encode(codec, &p)?.into_tensor(),
                class: e.class.index(),
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format(path, e))?;
        buf.write_all(b"\n").map_err(Error::io(path))?;
    }
    write_atomic(path, &buf)
}

/// Reads line-delimited score records; blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

fn split_key(seed: u64, video_id: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{video_id}").as_bytes());
    u64::from_be_bytes(h[..8].try_into().unwrap())
}

/// Seed-stable train/validation split by hashed id. With two or more clips
/// both sides are non-empty.
pub fn split(entries: &[ClipEntry], seed: u64, fraction: f64) -> (Vec<ClipEntry>, Vec<ClipEntry>) {
    let cut = (fraction * u64::MAX as f64) as u64;
    let mut keyed: Vec<(u64, &ClipEntry)> = entries
        .iter()
        .map(|e| (split_key(seed, &e.video_id), e))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.video_id.cmp(&b.1.video_id)));
    let mut n_val = keyed.iter().filter(|(k, _)| *k < cut).count();
    if entries.len() >= 2 {
        n_val = n_val.clamp(1, entries.len() - 1);
    }
    let val: Vec<String> = keyed[..n_val]
        .iter()
        .map(|(_, e)| e.video_id.clone())
        .collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for e in entries {
        if val.contains(&e.video_id) {
            valid.push(e.clone())
        } else {
            train.push(e.clone())
        }
    }
    (train, valid)
}
