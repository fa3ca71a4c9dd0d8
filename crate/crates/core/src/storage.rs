//! Persistence: the flat key-value pipeline config, the checkpoint file
//! format (text header plus named little-endian f32 arrays), run manifests
//! with content hashes, and the CSV report writers.
//!
//! Run directory layout:
//!
//! ```text
//! run/
//!   config.txt      effective pipeline config
//!   manifest.txt    input/output hashes, seeds, codec version, stages
//!   tokens/         token text for favorite, input, transferred
//!   checkpoints/    trained model
//!   patterns/       extracted pattern interval
//!   reports/        loss curve, distribution metrics, pattern similarity
//!   transferred.mid
//! ```

use crate::metrics::SimilarityReport;
use crate::predictor::{
    AttentionConfig, AttentionModel, Checkpoint, CheckpointModel, FavoriteWeights, ModelKind,
    NGramModel, Predictor,
};
use crate::remi::{EventFamily, Vocabulary, CODEC_VERSION, VOCAB_SIZE};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: line {line}, key {key:?}: {detail}")]
    ParseError {
        path: String,
        line: usize,
        key: String,
        detail: String,
    },
    #[error("hash mismatch for {path}: manifest says {expected}, file is {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("version mismatch: found {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Pipeline config
// ---------------------------------------------------------------------------

/// Every knob of the end-to-end pipeline, as a flat diffable text file.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub selected: BTreeSet<EventFamily>,
    pub pattern_length: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub stop_loss: f64,
    pub sequence_length: usize,
    pub model: ModelKind,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub memory: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub pretrain_epochs: usize,
    pub ngram_order: usize,
    pub ngram_delta: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.01,
            selected: [EventFamily::NoteOn].into_iter().collect(),
            pattern_length: 8,
            temperature: 1.0,
            epochs: 200,
            stop_loss: 0.1,
            sequence_length: 128,
            model: ModelKind::Attention,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            window: 128,
            memory: 128,
            learning_rate: 0.05,
            grad_clip: 1.0,
            pretrain_epochs: 20,
            ngram_order: 3,
            ngram_delta: 0.1,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            window: self.window,
            memory: self.memory,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn to_text(&self) -> String {
        let selected = self
            .selected
            .iter()
            .map(|f| f.kebab_name())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "# favtune pipeline configuration");
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "selected = {selected}");
        let _ = writeln!(s, "pattern_length = {}", self.pattern_length);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "stop_loss = {}", self.stop_loss);
        let _ = writeln!(s, "sequence_length = {}", self.sequence_length);
        let _ = writeln!(s, "model = {}", self.model.name());
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "memory = {}", self.memory);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "ngram_order = {}", self.ngram_order);
        let _ = writeln!(s, "ngram_delta = {}", self.ngram_delta);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn from_text(text: &str, path_label: &str) -> Result<Self, StorageError> {
        let mut config = PipelineConfig::default();
        let err = |line: usize, key: &str, detail: String| StorageError::ParseError {
            path: path_label.to_string(),
            line,
            key: key.to_string(),
            detail,
        };
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, line, "expected key = value".into()))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(line_no, key, "duplicate key".into()));
            }
            macro_rules! parse {
                ($ty:ty) => {
                    value
                        .parse::<$ty>()
                        .map_err(|e| err(line_no, key, format!("bad value {value:?}: {e}")))?
                };
            }
            match key {
                "alpha" => config.alpha = parse!(f64),
                "selected" => {
                    let mut set = BTreeSet::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        let family = EventFamily::from_kebab(part).ok_or_else(|| {
                            err(line_no, key, format!("unknown event family {part:?}"))
                        })?;
                        set.insert(family);
                    }
                    config.selected = set;
                }
                "pattern_length" => config.pattern_length = parse!(usize),
                "temperature" => config.temperature = parse!(f64),
                "epochs" => config.epochs = parse!(usize),
                "stop_loss" => config.stop_loss = parse!(f64),
                "sequence_length" => config.sequence_length = parse!(usize),
                "model" => {
                    config.model = ModelKind::from_name(value).ok_or_else(|| {
                        err(line_no, key, format!("unknown model {value:?}"))
                    })?;
                }
                "embed_dim" => config.embed_dim = parse!(usize),
                "layers" => config.layers = parse!(usize),
                "heads" => config.heads = parse!(usize),
                "window" => config.window = parse!(usize),
                "memory" => config.memory = parse!(usize),
                "learning_rate" => config.learning_rate = parse!(f64),
                "grad_clip" => config.grad_clip = parse!(f64),
                "pretrain_epochs" => config.pretrain_epochs = parse!(usize),
                "ngram_order" => config.ngram_order = parse!(usize),
                "ngram_delta" => config.ngram_delta = parse!(f64),
                "seed" => config.seed = parse!(u64),
                _ => return Err(err(line_no, key, "unknown key".into())),
            }
        }
        config.validate(path_label)?;
        Ok(config)
    }

    pub fn validate(&self, path_label: &str) -> Result<(), StorageError> {
        let err = |key: &str, detail: &str| StorageError::ParseError {
            path: path_label.to_string(),
            line: 0,
            key: key.to_string(),
            detail: detail.to_string(),
        };
        // NaN must fail validation, so each bound is written positively
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.alpha) {
            return Err(err("alpha", "must be > 0"));
        }
        if self.selected.is_empty() {
            return Err(err("selected", "must name at least one event family"));
        }
        if self.pattern_length < 2 {
            return Err(err("pattern_length", "must be >= 2"));
        }
        if !positive(self.temperature) {
            return Err(err("temperature", "must be > 0"));
        }
        if !(self.stop_loss.is_finite() && self.stop_loss >= 0.0) {
            return Err(err("stop_loss", "must be >= 0"));
        }
        if self.sequence_length < 8 {
            return Err(err("sequence_length", "must be >= 8"));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(err("embed_dim", "must be a positive multiple of heads"));
        }
        if self.layers == 0 {
            return Err(err("layers", "must be >= 1"));
        }
        if self.window < 2 {
            return Err(err("window", "must be >= 2"));
        }
        if !positive(self.learning_rate) {
            return Err(err("learning_rate", "must be > 0"));
        }
        if !positive(self.grad_clip) {
            return Err(err("grad_clip", "must be > 0"));
        }
        if !(2..=5).contains(&self.ngram_order) {
            return Err(err("ngram_order", "must be in 2..=5"));
        }
        if !positive(self.ngram_delta) {
            return Err(err("ngram_delta", "must be > 0"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    PipelineConfig::from_text(&text, &path.display().to_string())
}

pub fn save_config(config: &PipelineConfig, path: &Path) -> Result<(), StorageError> {
    fs::write(path, config.to_text()).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "favtune-checkpoint v1";

fn push_array(
    header: &mut String,
    blob: &mut Vec<u8>,
    name: &str,
    shape: &[usize],
    data: &[f64],
) {
    let dims = shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    let _ = writeln!(header, "array = {name} {dims}");
    for &v in data {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialize a checkpoint: a human-readable header, then the named parameter
/// arrays as little-endian 32-bit floats in header order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), StorageError> {
    let mut header = String::new();
    let _ = writeln!(header, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(header, "kind = {}", ckpt.kind().name());
    let _ = writeln!(header, "codec = {CODEC_VERSION}");
    let _ = writeln!(header, "vocab_hash = {}", ckpt.vocab_hash);
    let _ = writeln!(header, "seed = {}", ckpt.seed);

    let mut arrays = String::new();
    let mut blob: Vec<u8> = Vec::new();

    match &ckpt.model {
        CheckpointModel::Attention(model) => {
            let cfg = model.config();
            let _ = writeln!(header, "embed_dim = {}", cfg.embed_dim);
            let _ = writeln!(header, "layers = {}", cfg.layers);
            let _ = writeln!(header, "heads = {}", cfg.heads);
            let _ = writeln!(header, "window = {}", cfg.window);
            let _ = writeln!(header, "memory = {}", cfg.memory);
            let _ = writeln!(header, "vocab_size = {}", cfg.vocab_size);
            for (name, data) in model.export_tensors() {
                let shape = model.shape_of(&name);
                push_array(&mut arrays, &mut blob, &name, &shape, &data);
            }
        }
        CheckpointModel::NGram(model) => {
            let _ = writeln!(header, "order = {}", model.order());
            let _ = writeln!(header, "delta = {}", model.delta());
            let _ = writeln!(header, "vocab_size = {}", model.vocab_size());
            let rows = model.rows();
            let k = model.order() - 1;
            let mut contexts = Vec::with_capacity(rows.len() * k);
            let mut tokens = Vec::with_capacity(rows.len());
            let mut counts = Vec::with_capacity(rows.len());
            for (context, token, count) in &rows {
                contexts.extend(context.iter().map(|&t| t as f64));
                tokens.push(*token as f64);
                counts.push(*count as f64);
            }
            push_array(&mut arrays, &mut blob, "contexts", &[rows.len(), k], &contexts);
            push_array(&mut arrays, &mut blob, "tokens", &[rows.len()], &tokens);
            push_array(&mut arrays, &mut blob, "counts", &[rows.len()], &counts);
        }
    }

    push_array(
        &mut arrays,
        &mut blob,
        "loss_curve",
        &[ckpt.loss_curve.len()],
        &ckpt.loss_curve,
    );
    if let Some(w) = &ckpt.weights {
        let _ = writeln!(header, "alpha = {}", w.alpha);
        let _ = writeln!(
            header,
            "weight_selected = {}",
            w.selected
                .iter()
                .map(|f| f.kebab_name())
                .collect::<Vec<_>>()
                .join(",")
        );
        push_array(
            &mut arrays,
            &mut blob,
            "favorite_weights",
            &[w.weights.len()],
            &w.weights,
        );
    }

    let mut out = fs::File::create(path).map_err(io_err(path))?;
    out.write_all(header.as_bytes()).map_err(io_err(path))?;
    out.write_all(arrays.as_bytes()).map_err(io_err(path))?;
    out.write_all(b"\n").map_err(io_err(path))?;
    out.write_all(&blob).map_err(io_err(path))?;
    Ok(())
}

struct HeaderMap {
    entries: Vec<(String, String)>,
}

impl HeaderMap {
    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, StorageError> {
        self.get(key)
            .ok_or_else(|| StorageError::MalformedCheckpoint(format!("missing key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, StorageError>
    where
        T::Err: std::fmt::Display,
    {
        self.require(key)?.parse::<T>().map_err(|e| {
            StorageError::MalformedCheckpoint(format!("bad value for {key:?}: {e}"))
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StorageError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;

    // header: lines up to the first blank line; blob follows
    let mut header_end = None;
    for i in 0..bytes.len().saturating_sub(1) {
        if bytes[i] == b'\n' && bytes[i + 1] == b'\n' {
            header_end = Some(i + 1);
            break;
        }
    }
    let header_end = header_end
        .ok_or_else(|| StorageError::MalformedCheckpoint("no header terminator".into()))?;
    let header_text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| StorageError::MalformedCheckpoint(format!("header not utf-8: {e}")))?;
    let blob = &bytes[header_end + 1..];

    let mut lines = header_text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != CHECKPOINT_MAGIC {
        return Err(StorageError::VersionMismatch {
            found: magic.to_string(),
            expected: CHECKPOINT_MAGIC.to_string(),
        });
    }
    let mut entries = Vec::new();
    let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "array" {
            let mut parts = value.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| StorageError::MalformedCheckpoint("array without name".into()))?;
            let dims = parts
                .next()
                .ok_or_else(|| StorageError::MalformedCheckpoint("array without shape".into()))?;
            let shape = dims
                .split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|e| {
                        StorageError::MalformedCheckpoint(format!("bad dim {d:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            arrays.push((name.to_string(), shape));
        } else {
            entries.push((key.to_string(), value.to_string()));
        }
    }
    let header = HeaderMap { entries };

    let vocab_hash = header.require("vocab_hash")?.to_string();
    if vocab_hash != Vocabulary.hash() {
        return Err(StorageError::VersionMismatch {
            found: format!("vocabulary {vocab_hash}"),
            expected: format!("vocabulary {}", Vocabulary.hash()),
        });
    }
    let seed: u64 = header.parse("seed")?;

    // decode arrays
    let mut offset = 0usize;
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, shape) in &arrays {
        let len: usize = shape.iter().product();
        let need = len * 4;
        if offset + need > blob.len() {
            return Err(StorageError::MalformedCheckpoint(format!(
                "array {name} runs past end of file"
            )));
        }
        let data: Vec<f64> = blob[offset..offset + need]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += need;
        tensors.push((name.clone(), data));
    }

    let take = |name: &str| -> Result<Vec<f64>, StorageError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.clone())
            .ok_or_else(|| StorageError::MalformedCheckpoint(format!("missing array {name:?}")))
    };

    let loss_curve = take("loss_curve")?;
    let weights = if header.get("alpha").is_some() {
        let alpha: f64 = header.parse("alpha")?;
        let mut selected = BTreeSet::new();
        for part in header.require("weight_selected")?.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            selected.insert(EventFamily::from_kebab(part).ok_or_else(|| {
                StorageError::MalformedCheckpoint(format!("unknown family {part:?}"))
            })?);
        }
        Some(FavoriteWeights {
            weights: take("favorite_weights")?,
            alpha,
            selected,
        })
    } else {
        None
    };

    let kind_name = header.require("kind")?;
    let kind = ModelKind::from_name(kind_name).ok_or_else(|| {
        StorageError::MalformedCheckpoint(format!("unknown kind {kind_name:?}"))
    })?;
    let model = match kind {
        ModelKind::Attention => {
            let config = AttentionConfig {
                embed_dim: header.parse("embed_dim")?,
                layers: header.parse("layers")?,
                heads: header.parse("heads")?,
                window: header.parse("window")?,
                memory: header.parse("memory")?,
                vocab_size: header.parse("vocab_size")?,
            };
            let model_tensors: Vec<(String, Vec<f64>)> = tensors
                .iter()
                .filter(|(n, _)| n != "loss_curve" && n != "favorite_weights")
                .cloned()
                .collect();
            let model = AttentionModel::from_tensors(config, seed, &model_tensors)
                .map_err(StorageError::MalformedCheckpoint)?;
            CheckpointModel::Attention(model)
        }
        ModelKind::NGram => {
            let order: usize = header.parse("order")?;
            let delta: f64 = header.parse("delta")?;
            let vocab_size: usize = header.parse("vocab_size")?;
            let contexts = take("contexts")?;
            let tokens = take("tokens")?;
            let counts = take("counts")?;
            let k = order - 1;
            if contexts.len() != tokens.len() * k || tokens.len() != counts.len() {
                return Err(StorageError::MalformedCheckpoint(
                    "ngram table shapes disagree".into(),
                ));
            }
            let rows: Vec<(Vec<u32>, u32, u32)> = (0..tokens.len())
                .map(|i| {
                    (
                        contexts[i * k..(i + 1) * k]
                            .iter()
                            .map(|&v| v as u32)
                            .collect(),
                        tokens[i] as u32,
                        counts[i] as u32,
                    )
                })
                .collect();
            CheckpointModel::NGram(NGramModel::from_rows(order, delta, vocab_size, &rows))
        }
    };

    Ok(Checkpoint {
        vocab_hash,
        seed,
        loss_curve,
        weights,
        model,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, StorageError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

const MANIFEST_MAGIC: &str = "favtune-manifest v1";

/// Record of one run: inputs and outputs with content hashes, the seed, the
/// codec version, and stage completion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    /// (role, path relative to the run dir or absolute, sha256)
    pub inputs: Vec<(String, String, String)>,
    pub outputs: Vec<(String, String, String)>,
    /// (stage name, unix timestamp seconds)
    pub stages: Vec<(String, u64)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_MAGIC}");
        let _ = writeln!(s, "run_id = {}", self.run_id);
        let _ = writeln!(s, "codec = {CODEC_VERSION}");
        let _ = writeln!(s, "vocab_hash = {}", Vocabulary.hash());
        let _ = writeln!(s, "seed = {}", self.seed);
        for (role, path, hash) in &self.inputs {
            let _ = writeln!(s, "input = {role} {hash} {path}");
        }
        for (role, path, hash) in &self.outputs {
            let _ = writeln!(s, "output = {role} {hash} {path}");
        }
        for (stage, ts) in &self.stages {
            let _ = writeln!(s, "stage = {stage} {ts}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StorageError> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != MANIFEST_MAGIC {
            return Err(StorageError::VersionMismatch {
                found: magic.to_string(),
                expected: MANIFEST_MAGIC.to_string(),
            });
        }
        let mut manifest = RunManifest::default();
        for line in lines {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "run_id" => manifest.run_id = value.to_string(),
                "seed" => {
                    manifest.seed = value.parse().map_err(|e| {
                        StorageError::MalformedCheckpoint(format!("bad seed: {e}"))
                    })?
                }
                "input" | "output" => {
                    let mut parts = value.splitn(3, ' ');
                    let role = parts.next().unwrap_or_default().to_string();
                    let hash = parts.next().unwrap_or_default().to_string();
                    let path = parts.next().unwrap_or_default().to_string();
                    if key == "input" {
                        manifest.inputs.push((role, path, hash));
                    } else {
                        manifest.outputs.push((role, path, hash));
                    }
                }
                "stage" => {
                    let mut parts = value.splitn(2, ' ');
                    let stage = parts.next().unwrap_or_default().to_string();
                    let ts = parts.next().and_then(|t| t.parse().ok()).unwrap_or(0);
                    manifest.stages.push((stage, ts));
                }
                _ => {}
            }
        }
        Ok(manifest)
    }

    /// Re-hash every referenced artifact; paths resolve relative to `root`.
    pub fn verify(&self, root: &Path) -> Result<(), StorageError> {
        for (_, path, expected) in self.inputs.iter().chain(&self.outputs) {
            let full = if Path::new(path).is_absolute() {
                PathBuf::from(path)
            } else {
                root.join(path)
            };
            let actual = sha256_file(&full)?;
            if actual != *expected {
                return Err(StorageError::HashMismatch {
                    path: path.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &RunManifest, path: &Path) -> Result<(), StorageError> {
    fs::write(path, manifest.to_text()).map_err(io_err(path))
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RunManifest::from_text(&text)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.12}"),
        None => "nan".to_string(),
    }
}

/// Distribution-overlap report: one summary row per metric plus per-bar
/// detail rows (`bar` empty for pooled whole-piece comparisons).
pub fn distribution_report_csv(report: &SimilarityReport) -> String {
    let mut s = String::from("record,metric,track,bar,value\n");
    for (metric, value) in &report.d_values {
        let _ = writeln!(s, "summary,{metric},,,{}", fmt_value(*value));
    }
    for d in &report.details {
        let bar = d.bar.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "bar,{},{},{bar},{}",
            d.metric.name(),
            d.track,
            fmt_value(Some(d.oa))
        );
    }
    s
}

/// Pattern-similarity rows: `piece` labels which comparison the row belongs
/// to (e.g. input vs transferred).
pub fn ps_report_csv(rows: &[(String, usize, f64)]) -> String {
    let mut s = String::from("piece,p,ps\n");
    for (piece, p, ps) in rows {
        let _ = writeln!(s, "{piece},{p},{ps:.12}");
    }
    s
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{loss:.12}", i + 1);
    }
    s
}

pub fn save_text(path: &Path, content: &str) -> Result<(), StorageError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, content).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{AttentionModel, Predictor};
    use crate::remi::TokenSequence;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_round_trips_bit_exact() {
        let config = PipelineConfig::default();
        let text = config.to_text();
        let back = PipelineConfig::from_text(&text, "test").unwrap();
        assert_eq!(back, config);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn zero_alpha_is_rejected_naming_the_key() {
        let text = "alpha = 0\n";
        match PipelineConfig::from_text(text, "test") {
            Err(StorageError::ParseError { key, .. }) => assert_eq!(key, "alpha"),
            other => panic!("expected ParseError naming alpha, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        match PipelineConfig::from_text("warp_speed = 9\n", "test") {
            Err(StorageError::ParseError { key, .. }) => assert_eq!(key, "warp_speed"),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_save_load_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = AttentionModel::new(
            crate::predictor::AttentionConfig {
                embed_dim: 8,
                layers: 1,
                heads: 2,
                window: 8,
                memory: 4,
                vocab_size: VOCAB_SIZE,
            },
            5,
        );
        // What goes to disk is f32; quantize first so the round trip is exact.
        model.quantize_to_f32();
        let ckpt = Checkpoint {
            vocab_hash: Vocabulary.hash(),
            seed: 5,
            loss_curve: vec![1.5, 0.75],
            weights: None,
            model: CheckpointModel::Attention(model.clone()),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let context = [1u32, 2, 3, 4];
        assert_eq!(
            loaded.predictor().predict(&context),
            model.predict(&context)
        );
        let relf32: Vec<f64> = ckpt.loss_curve.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(loaded.loss_curve, relf32);
    }

    #[test]
    fn ngram_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ngram.ckpt");
        let mut model = crate::predictor::NGramModel::new(3, 0.1, VOCAB_SIZE);
        model.fit(&[TokenSequence::new(vec![1, 2, 3, 1, 2, 4, 1, 2, 3])]);
        let ckpt = Checkpoint {
            vocab_hash: Vocabulary.hash(),
            seed: 9,
            loss_curve: vec![],
            weights: None,
            model: CheckpointModel::NGram(model.clone()),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let context = [5u32, 1, 2];
        assert_eq!(
            loaded.predictor().predict(&context),
            model.predict(&context)
        );
    }

    #[test]
    fn corrupt_magic_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, "not-a-checkpoint v9\n\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(StorageError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn manifest_catches_single_byte_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("artifact.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let len = rng.gen_range(1..200usize);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            fs::write(&artifact, &data).unwrap();
            let manifest = RunManifest {
                run_id: "t".into(),
                seed: 0,
                inputs: vec![(
                    "artifact".into(),
                    "artifact.bin".into(),
                    sha256_hex(&data),
                )],
                outputs: vec![],
                stages: vec![],
            };
            manifest.verify(dir.path()).unwrap();

            // flip one random bit
            let mut corrupted = data.clone();
            let byte = rng.gen_range(0..corrupted.len());
            let bit = 1u8 << rng.gen_range(0..8);
            corrupted[byte] ^= bit;
            fs::write(&artifact, &corrupted).unwrap();
            assert!(matches!(
                manifest.verify(dir.path()),
                Err(StorageError::HashMismatch { .. })
            ));
        }
    }

    #[test]
    fn manifest_text_round_trips() {
        let manifest = RunManifest {
            run_id: "abc123".into(),
            seed: 7,
            inputs: vec![("favorite".into(), "f.mid".into(), "00ff".into())],
            outputs: vec![("transferred".into(), "out.mid".into(), "11aa".into())],
            stages: vec![("tokenize".into(), 1700000000)],
        };
        let back = RunManifest::from_text(&manifest.to_text()).unwrap();
        assert_eq!(back, manifest);
    }
}
