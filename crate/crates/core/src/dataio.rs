//! On-disk formats: JSON-lines pose records, dataset manifests, binary
//! checkpoints and run configuration files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::model::{GaitPT, GaitPTConfig};
use crate::skeleton::{
    duplicate_nose, normalize_sequence, Condition, GaitSequence, NUM_RAW_JOINTS,
};
use crate::synth::Split;
use crate::tensor::{DType, Element, Tensor};
use crate::training::TrainConfig;

/// One line of a sequence file. Coordinates are in pixels of a frame
/// `frame_width` wide, 17 COCO joints per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub key: String,
    pub subject_id: String,
    pub condition: Condition,
    pub view: i32,
    #[serde(default)]
    pub session: u32,
    pub frame_width: f64,
    pub frames: Vec<Vec<[f64; 2]>>,
}

impl SequenceRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.frames.is_empty() {
            return Err(format!("record {} has no frames", self.key));
        }
        if let Some((i, f)) = self
            .frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != NUM_RAW_JOINTS)
        {
            return Err(format!(
                "record {} frame {i} has {} joints, expected {NUM_RAW_JOINTS}",
                self.key,
                f.len()
            ));
        }
        if !(self.frame_width > 0.0) || !self.frame_width.is_finite() {
            return Err(format!(
                "record {} has frame_width {}",
                self.key, self.frame_width
            ));
        }
        if self
            .frames
            .iter()
            .flatten()
            .flatten()
            .any(|c| !c.is_finite())
        {
            return Err(format!("record {} has non-finite coordinates", self.key));
        }
        Ok(())
    }

    /// Drops the duplicated nose and scales back to pixels of `frame_width`.
    pub fn from_sequence(seq: &GaitSequence, frame_width: f64) -> Self {
        Self {
            key: seq.key.clone(),
            subject_id: seq.subject_id.clone(),
            condition: seq.condition,
            view: seq.view,
            session: seq.session,
            frame_width,
            frames: seq
                .frames
                .iter()
                .map(|p| {
                    p.raw()
                        .iter()
                        .map(|j| [j[0] * frame_width, j[1] * frame_width])
                        .collect()
                })
                .collect(),
        }
    }

    /// Duplicates the nose and divides by the frame width.
    pub fn to_sequence(&self) -> Result<GaitSequence> {
        self.validate().map_err(Error::Input)?;
        let frames = self
            .frames
            .iter()
            .map(|f| duplicate_nose(f))
            .collect::<Result<Vec<_>>>()?;
        let seq = GaitSequence {
            key: self.key.clone(),
            subject_id: self.subject_id.clone(),
            condition: self.condition,
            view: self.view,
            session: self.session,
            frames,
        };
        normalize_sequence(&seq, self.frame_width)
    }
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parses a JSON-lines sequence file without normalizing. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn read_records(path: &Path) -> Result<Vec<SequenceRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &bytes)
}

pub fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<SequenceRecord>> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_slice(line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|m| format_err(path, i + 1, m))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads, validates and normalizes every sequence in a file.
pub fn read_sequences(path: &Path) -> Result<Vec<GaitSequence>> {
    let records = read_records(path)?;
    let mut keys = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if !keys.insert(r.key.as_str()) {
            return Err(format_err(path, i + 1, format!("duplicate key {}", r.key)));
        }
        out.push(r.to_sequence()?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Input(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    /// Seed the dataset was generated from, if any.
    pub seed: Option<u64>,
    /// Free-form generator settings echoed for provenance.
    #[serde(default)]
    pub generator: serde_json::Value,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    /// Checks that no key is assigned to two splits.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Input(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for f in &self.files {
            for k in &f.keys {
                if let Some(prev) = seen.insert(k, f.split) {
                    return Err(Error::Input(format!(
                        "key {k} appears in both the {} and {} splits",
                        prev.name(),
                        f.split.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn keys(&self, split: Split) -> impl Iterator<Item = &str> {
        self.files
            .iter()
            .filter(move |f| f.split == split)
            .flat_map(|f| f.keys.iter().map(String::as_str))
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| format_err(path, e.line(), e.to_string()))?;
        manifest.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for f in &manifest.files {
            let p = root.join(&f.path);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "manifest references a missing file",
                    ),
                ));
            }
        }
        Ok(Self { manifest, root })
    }

    /// Every sequence of one split, in manifest order. Files must hold
    /// exactly the keys the manifest lists for them.
    pub fn load(&self, split: Split) -> Result<Vec<GaitSequence>> {
        let mut out = Vec::new();
        for f in self.manifest.files.iter().filter(|f| f.split == split) {
            let path = self.root.join(&f.path);
            let seqs = read_sequences(&path)?;
            let got: Vec<&str> = seqs.iter().map(|s| s.key.as_str()).collect();
            let want: Vec<&str> = f.keys.iter().map(String::as_str).collect();
            if got != want {
                return Err(Error::Input(format!(
                    "{} holds keys that differ from the manifest listing",
                    path.display()
                )));
            }
            out.extend(seqs);
        }
        Ok(out)
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    manifest.validate()?;
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GAITPTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: DType,
    pub config: GaitPTConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a checkpoint: magic, little-endian u64 header length, JSON
/// header, then every parameter's scalars little-endian in header order.
pub fn checkpoint_bytes<T: Element>(model: &GaitPT<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(model.param_count() * T::DTYPE.size());
    let mut tensors = Vec::with_capacity(model.params().len());
    for p in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        for v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: model.config().clone(),
        tensors,
        payload_bytes: payload.len() as u64,
        sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Input(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Element>(model: &GaitPT<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Splits a checkpoint into its header and verified payload.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[16..];
    if header_len > rest.len() as u64 {
        return Err(Error::Integrity(format!(
            "header claims {header_len} bytes but only {} follow",
            rest.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let header: CheckpointHeader = serde_json::from_slice(header)
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let expected = header
        .tensors
        .iter()
        .try_fold(0u64, |acc, t| {
            t.shape
                .iter()
                .try_fold(1u64, |n, d| n.checked_mul(*d as u64))
                .and_then(|n| n.checked_mul(header.dtype.size() as u64))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| Error::Integrity("tensor table overflows".into()))?;
    if expected != header.payload_bytes || payload.len() as u64 != expected {
        return Err(Error::Integrity(format!(
            "payload should be {expected} bytes, found {}",
            payload.len()
        )));
    }
    let digest = hex(&Sha256::digest(payload));
    if digest != header.sha256 {
        return Err(Error::Integrity(format!(
            "payload checksum {digest} does not match header {}",
            header.sha256
        )));
    }
    Ok((header, payload))
}

/// Rebuilds a model from checkpoint bytes. The element type must match the
/// stored one.
pub fn model_from_checkpoint<T: Element>(bytes: &[u8]) -> Result<GaitPT<T>> {
    let (header, payload) = parse_checkpoint(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(config_err!(
            "checkpoint stores {} parameters, requested {}",
            header.dtype,
            T::DTYPE
        ));
    }
    let mut model = GaitPT::new(header.config.clone(), 0)?;
    let mut offset = 0;
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let size = T::DTYPE.size();
        let data = payload[offset..offset + n * size]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        offset += n * size;
        values.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    model.load_values(values)?;
    Ok(model)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<GaitPT<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&bytes)
}

/// Loads a checkpoint and insists that it was trained with `expected`.
pub fn load_checkpoint_for<T: Element>(path: &Path, expected: &GaitPTConfig) -> Result<GaitPT<T>> {
    let model = load_checkpoint::<T>(path)?;
    if model.config() != expected {
        let a = serde_json::to_string(model.config()).unwrap_or_default();
        let b = serde_json::to_string(expected).unwrap_or_default();
        return Err(config_err!(
            "checkpoint config {a} does not match requested config {b}"
        ));
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sequences shorter than this are dropped on load.
    pub min_frames: usize,
    /// Windows per inference batch when embedding.
    pub embed_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_frames: 60,
            embed_batch: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: GaitPTConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config(m) => config_err!("model: {m}"),
            other => other,
        })?;
        self.train.validate()?;
        if self.data.min_frames < self.model.sequence_length {
            return Err(config_err!(
                "data.min_frames ({}) is shorter than model.sequence_length ({})",
                self.data.min_frames,
                self.model.sequence_length
            ));
        }
        if self.data.embed_batch == 0 {
            return Err(config_err!("data.embed_batch must be positive"));
        }
        Ok(())
    }
}

/// Parses and validates a run configuration; missing keys take defaults,
/// unknown keys are rejected with their path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err!("at {path}: {}", e.inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
