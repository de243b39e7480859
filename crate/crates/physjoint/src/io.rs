//! File helpers: atomic writes, JSON, PNG frame folders and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use physjoint_core::tensor::Tensor;
use physjoint_core::video::VideoClip;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One 8-bit PNG per frame, named `000.png`, `001.png`, ...
pub fn write_frames(dir: &Path, clip: &VideoClip) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = (clip.height(), clip.width());
    for f in 0..clip.frames() {
        let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let c = clip.rgb(f, y as usize, x as usize);
            Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
        });
        let path = dir.join(format!("{f:03}.png"));
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::format(&path, e))?;
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn read_frames(dir: &Path) -> Result<VideoClip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no PNG frames"));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p).map_err(|e| Error::format(p, e))?.to_rgb8();
        frames.push(img);
    }
    let (w, h) = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(Error::format(dir, "frames differ in size"));
    }
    let (n, hw) = (frames.len(), (w * h) as usize);
    let data = Tensor::from_fn(&[3, n, h as usize, w as usize], |i| {
        let (c, rest) = (i / (n * hw), i % (n * hw));
        let (f, p) = (rest / hw, rest % hw);
        let px = frames[f].get_pixel(p as u32 % w, p as u32 / w);
        px.0[c] as f64 / 255.0
    });
    Ok(VideoClip::new(data)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of every file under `paths` (recursively), keyed by path relative
/// to `root` so the hash does not depend on where the run lives.
pub fn hash_tree(root: &Path, paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(Error::io(&f))?);
        h.update([0]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for e in fs::read_dir(p).map_err(Error::io(p))? {
            let e = e.map_err(Error::io(p))?;
            collect_files(&e.path(), out)?;
        }
    } else if p.is_file() && p.extension().is_none_or(|x| x != "tmp") {
        out.push(p.to_path_buf());
    }
    Ok(())
}
