//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `PJCKPT01`, a little-endian `u64` header
//! length, a JSON header, then every parameter as little-endian `f64` in
//! header order. The header carries a SHA-256 of the payload.

use std::fs;
use std::path::Path;

use physjoint_core::bct::{Teacher, TeacherConfig};
use physjoint_core::dit::{BackboneConfig, SingleStream};
use physjoint_core::params::ParamStore;
use physjoint_core::tensor::numel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};

pub const MAGIC: &[u8; 8] = b"PJCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// What the parameters belong to, e.g. `teacher-parallel` or `student`.
    pub kind: String,
    pub step: usize,
    /// Configuration needed to rebuild the model skeleton.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
}

pub fn save(
    path: &Path,
    kind: &str,
    step: usize,
    config: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        step,
        config,
        params,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

/// Parsed checkpoint: header plus one flat value vector per parameter.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let payload = &bytes[16 + hlen..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let total: usize = header.params.iter().map(|p| numel(&p.shape)).sum();
    if payload.len() != total * 8 {
        return Err(bad("payload length disagrees with the header"));
    }
    let mut values = Vec::with_capacity(header.params.len());
    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in &header.params {
        values.push(chunks.by_ref().take(numel(&p.shape)).collect());
    }
    Ok(Checkpoint { header, values })
}

impl Checkpoint {
    /// Copies every parameter into `store`, which must hold exactly the same
    /// names and shapes (it is normally a freshly built model skeleton).
    pub fn load_into(&self, path: &Path, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.header.params.len() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint has {} parameters, model has {}",
                    self.header.params.len(),
                    store.len()
                ),
            ));
        }
        for (p, v) in self.header.params.iter().zip(&self.values) {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {}", p.name)))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(Error::format(
                    path,
                    format!("shape mismatch for {}", p.name),
                ));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

/// Reads `path`, checks its kind and loads it into `store`.
pub fn load(path: &Path, kind: &str, store: &mut ParamStore) -> Result<Header> {
    let ck = read(path)?;
    if ck.header.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} checkpoint, found {}", ck.header.kind),
        ));
    }
    ck.load_into(path, store)?;
    Ok(ck.header)
}

pub const TEACHER: &str = "teacher";
pub const STUDENT: &str = "student";
pub const BASELINE: &str = "baseline";

pub fn save_teacher(
    path: &Path,
    cfg: &TeacherConfig,
    teacher: &Teacher,
    step: usize,
) -> Result<()> {
    let config = serde_json::to_value(cfg).map_err(|e| Error::format(path, e))?;
    save(path, TEACHER, step, config, teacher.store())
}

/// Rebuilds the teacher described in the header and loads its weights.
pub fn load_teacher(path: &Path) -> Result<(Teacher, TeacherConfig)> {
    let ck = read(path)?;
    if ck.header.kind != TEACHER {
        return Err(Error::format(
            path,
            format!("expected a teacher checkpoint, found {}", ck.header.kind),
        ));
    }
    let cfg: TeacherConfig =
        serde_json::from_value(ck.header.config.clone()).map_err(|e| Error::format(path, e))?;
    let mut teacher = Teacher::new(&cfg)?;
    ck.load_into(path, teacher.store_mut())?;
    Ok((teacher, cfg))
}

/// Saves a single-stream model under `kind` (student or baseline).
pub fn save_single(path: &Path, kind: &str, model: &SingleStream, step: usize) -> Result<()> {
    let config = serde_json::to_value(&model.dit.cfg).map_err(|e| Error::format(path, e))?;
    save(path, kind, step, config, &model.store)
}

pub fn load_single(path: &Path, kind: &str) -> Result<SingleStream> {
    let ck = read(path)?;
    if ck.header.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} checkpoint, found {}", ck.header.kind),
        ));
    }
    let cfg: BackboneConfig =
        serde_json::from_value(ck.header.config.clone()).map_err(|e| Error::format(path, e))?;
    let mut model = SingleStream::new(&cfg)?;
    ck.load_into(path, &mut model.store)?;
    Ok(model)
}
