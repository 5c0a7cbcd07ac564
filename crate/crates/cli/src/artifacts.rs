//! Stage directories, stamps, atomic writes and the feature file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowgen::convnet::FeatureStack;
use flowgen::Tensor3;

use crate::error::{CliError, Result};

pub const STAMP: &str = "stage.json";

/// Written last into every stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every file the stage wrote, by path relative to the stage directory.
    pub files: BTreeMap<String, String>,
}

/// Write to a temporary sibling, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

/// Output directory of one stage, tracking the files written into it.
pub struct StageDir {
    pub stage: &'static str,
    pub path: PathBuf,
    files: BTreeMap<String, String>,
}

impl StageDir {
    /// Refuses to touch a completed stage directory unless `force`, in which
    /// case the old contents are removed first.
    pub fn create(root: &Path, name: &str, stage: &'static str, force: bool) -> Result<Self> {
        let path = root.join(name);
        if path.join(STAMP).exists() && !force {
            return Err(CliError::Exists { path });
        }
        if path.exists() {
            fs::remove_dir_all(&path).map_err(CliError::io(&path))?;
        }
        fs::create_dir_all(&path).map_err(CliError::io(&path))?;
        Ok(Self {
            stage,
            path,
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path.join(rel), bytes)?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self, config_hash: &str, seed: u64) -> Result<PathBuf> {
        let stamp = StageStamp {
            stage: self.stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            files: self.files,
        };
        write_json(&self.path.join(STAMP), &stamp)?;
        Ok(self.path)
    }
}

/// Checks that an upstream stage finished under the current config.
pub fn require(root: &Path, dir: &str, stage: &'static str, needed: &'static str, hash: &str) -> Result<PathBuf> {
    let path = root.join(dir);
    let stamp_path = path.join(STAMP);
    if !stamp_path.exists() {
        return Err(CliError::MissingArtifact {
            stage,
            stage_needed: needed,
            path: stamp_path,
        });
    }
    let stamp: StageStamp = read_json(&stamp_path)?;
    if stamp.config_hash != hash {
        return Err(CliError::StaleArtifact {
            path: stamp_path,
            expected: hash.to_string(),
            found: stamp.config_hash,
        });
    }
    Ok(path)
}

/// `FST1`, u32 tap count, then per tap: u32 name length, UTF-8 name,
/// u32 channels, height, width, and the tensor as little-endian f32.
pub fn features_to_bytes(features: &FeatureStack) -> Vec<u8> {
    let mut out = b"FST1".to_vec();
    out.extend((features.layers.len() as u32).to_le_bytes());
    for (name, t) in &features.layers {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        let (c, h, w) = t.dims();
        for d in [c, h, w] {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.as_slice() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureStack> {
    let bad = |d: &str| CliError::Core(flowgen::Error::Format { what: "FST1 features", detail: d.to_string() });
    let mut r = bytes;
    let u32_at = |r: &mut &[u8]| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
        Ok(u32::from_le_bytes(b))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != b"FST1" {
        return Err(bad("bad magic"));
    }
    let count = u32_at(&mut r)?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32_at(&mut r)? as usize;
        if r.len() < len {
            return Err(bad("truncated"));
        }
        let name = String::from_utf8(r[..len].to_vec()).map_err(|_| bad("layer name is not UTF-8"))?;
        r = &r[len..];
        let (c, h, w) = (u32_at(&mut r)? as usize, u32_at(&mut r)? as usize, u32_at(&mut r)? as usize);
        let n = c * h * w;
        if r.len() < 4 * n {
            return Err(bad("truncated"));
        }
        let data = r[..4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        r = &r[4 * n..];
        layers.push((name, Tensor3::from_vec(c, h, w, data)?));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(FeatureStack { layers })
}
