//! Checkpoint bundles: a directory holding a versioned text manifest, a
//! tensor index and one little-endian `f32` blob per tensor.
//!
//! ```text
//! manifest.toml           configs, step, cursor, RNG state, file hashes
//! tensors.toml            name / shape / offset / file / sha256 per tensor
//! params/<name>.f32
//! optim/m/<name>.f32      only when training state is present
//! optim/v/<name>.f32
//! trace.json              loss trace, only with training state
//! ```
//!
//! Saving the same bundle twice yields byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataCursor;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ParamSet};
use crate::trainer::{Moments, TracePoint, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const INDEX: &str = "tensors.toml";
const TRACE: &str = "trace.json";
/// Provenance file a tool may add to a bundle; not part of its content.
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub params: ParamSet,
    pub train_config: Option<TrainConfig>,
    pub state: Option<TrainState>,
    /// Free-form labels (stage, mode, ...) carried in the manifest.
    pub labels: BTreeMap<String, String>,
}

impl Bundle {
    pub fn params_only(params: ParamSet) -> Self {
        Bundle {
            params,
            train_config: None,
            state: None,
            labels: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    step: u64,
    cursor: String,
    rng: RngRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<StateRecord>,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    /// sha256 of every other file, keyed by relative path.
    hashes: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset in the canonical flattened parameter order.
    offset: u64,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    tensor: Vec<IndexEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], hashes: &mut BTreeMap<String, String>) -> Result<String> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let h = sha256_hex(bytes);
    hashes.insert(rel.to_string(), h.clone());
    Ok(h)
}

fn write_tensors(root: &Path, dir: &str, set: &ParamSet, hashes: &mut BTreeMap<String, String>) -> Result<Vec<IndexEntry>> {
    let mut offset = 0u64;
    let mut entries = Vec::new();
    for t in set.tensors() {
        let file = format!("{dir}/{}.f32", t.name);
        let sha256 = write_file(root, &file, &f32_bytes(t.data), hashes)?;
        entries.push(IndexEntry {
            name: t.name,
            shape: t.shape,
            offset,
            file,
            sha256,
        });
        offset += t.data.len() as u64;
    }
    Ok(entries)
}

fn write_bundle(root: &Path, b: &Bundle) -> Result<()> {
    b.params.validate()?;
    let mut hashes = BTreeMap::new();
    let entries = write_tensors(root, "params", &b.params, &mut hashes)?;
    let index = toml::to_string(&Index { tensor: entries }).map_err(|e| Error::Decode(e.to_string()))?;
    write_file(root, INDEX, index.as_bytes(), &mut hashes)?;

    let state = match &b.state {
        None => None,
        Some(s) => {
            write_tensors(root, "optim/m", &s.moments.m, &mut hashes)?;
            write_tensors(root, "optim/v", &s.moments.v, &mut hashes)?;
            let trace = serde_json::to_vec_pretty(&s.trace).map_err(|e| Error::Decode(e.to_string()))?;
            write_file(root, TRACE, &trace, &mut hashes)?;
            Some(StateRecord {
                step: s.step,
                cursor: s.cursor.snapshot(),
                rng: RngRecord {
                    seed: hex::encode(s.rng.get_seed()),
                    stream: s.rng.get_stream(),
                    word_pos: s.rng.get_word_pos().to_string(),
                },
            })
        }
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: b.params.config.clone(),
        train: b.train_config.clone(),
        state,
        labels: b.labels.clone(),
        hashes,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Decode(e.to_string()))?;
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `bundle` to `dir`, replacing any previous bundle there. The new
/// bundle is assembled beside `dir` first, so a failed save leaves the old
/// one intact.
pub fn save(dir: &Path, bundle: &Bundle) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy();
    let staging = dir.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    write_bundle(&staging, bundle)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn read_checked(root: &Path, rel: &str, want: Option<&String>) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = want.ok_or_else(|| Error::Decode(format!("{rel} missing from manifest hashes")))?;
    if &sha256_hex(&bytes) != want {
        return Err(Error::Decode(format!("{rel}: content hash mismatch")));
    }
    Ok(bytes)
}

fn read_tensors(root: &Path, dir: &str, config: &ModelConfig, hashes: &BTreeMap<String, String>) -> Result<ParamSet> {
    let mut set = ParamSet::zeros(config);
    for t in set.tensors_mut() {
        let rel = format!("{dir}/{}.f32", t.name);
        let bytes = read_checked(root, &rel, hashes.get(&rel))?;
        if bytes.len() != t.data.len() * 4 {
            return Err(Error::Decode(format!(
                "{rel}: {} bytes, expected {}",
                bytes.len(),
                t.data.len() * 4
            )));
        }
        for (d, c) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(set)
}

pub fn load(dir: &Path) -> Result<Bundle> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Decode(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    m.model.validate()?;
    let index_bytes = read_checked(dir, INDEX, m.hashes.get(INDEX))?;
    let index: Index = toml::from_str(&String::from_utf8_lossy(&index_bytes))
        .map_err(|e| Error::Decode(format!("tensor index: {e}")))?;
    let params = read_tensors(dir, "params", &m.model, &m.hashes)?;
    let mut offset = 0u64;
    let tensors = params.tensors();
    if index.tensor.len() != tensors.len() {
        return Err(Error::Decode("tensor index does not match the model config".into()));
    }
    for (e, t) in index.tensor.iter().zip(&tensors) {
        if e.name != t.name || e.shape != t.shape || e.offset != offset {
            return Err(Error::Decode(format!("tensor index entry {} is inconsistent", e.name)));
        }
        offset += t.data.len() as u64;
    }
    params.validate()?;

    let state = match m.state {
        None => None,
        Some(s) => {
            let moments = Moments {
                m: read_tensors(dir, "optim/m", &m.model, &m.hashes)?,
                v: read_tensors(dir, "optim/v", &m.model, &m.hashes)?,
            };
            let trace: Vec<TracePoint> = serde_json::from_slice(&read_checked(dir, TRACE, m.hashes.get(TRACE))?)
                .map_err(|e| Error::Decode(format!("trace: {e}")))?;
            let seed: [u8; 32] = hex::decode(&s.rng.seed)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| Error::Decode("rng seed must be 32 hex bytes".into()))?;
            let word_pos: u128 = s
                .rng
                .word_pos
                .parse()
                .map_err(|_| Error::Decode("rng word_pos".into()))?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(s.rng.stream);
            rng.set_word_pos(word_pos);
            Some(TrainState {
                step: s.step,
                moments,
                cursor: DataCursor::restore(&s.cursor)?,
                rng,
                trace,
            })
        }
    };
    Ok(Bundle {
        params,
        train_config: m.train,
        state,
        labels: m.labels,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// sha256 over every file of a bundle: relative paths and contents, in
/// sorted order. A top-level run record is skipped.
pub fn bundle_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut h = Sha256::new();
    for rel in files.into_iter().filter(|r| r.as_os_str() != RUN_RECORD) {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
