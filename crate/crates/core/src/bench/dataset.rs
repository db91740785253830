//! Dataset files: JSON Lines records grouped into experiences by a manifest.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json           {"experiences": [{"label", "file", "eval_file", "new_models_file"}]}
//! exp1.jsonl              one DatasetRecord per line
//! exp1.features.bin       optional feature sidecar, one row per line of exp1.jsonl
//! exp1_models.jsonl       models introduced by the experience
//! exp1_models.cards.bin   optional card-feature sidecar
//! ```
//!
//! Inline `features` in a record take precedence over the sidecar; records
//! with neither are featurized from their instruction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::featurize::featurize;
use super::generate::EVAL_FRACTION;
use crate::error::{Error, Result};
use crate::matrix_io::{read_f32_rows, write_f32_rows, FEATURE_MAGIC};
use crate::registry::{ModelId, ModelRecord, Registry};
use crate::rng;
use crate::training::{Example, Experience};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub instruction: String,
    pub model_name: ModelId,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelLine {
    model_name: ModelId,
    domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_models_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiences: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Dimension used when records must be featurized from text.
    pub feature_dim: usize,
    pub featurize_seed: u64,
    /// Seed of the per-model split applied when an experience has no eval file.
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            feature_dim: 256,
            featurize_seed: 0,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Every model in the stream, in registration order.
    pub registry: Registry,
    pub experiences: Vec<Experience>,
}

/// Sidecar holding the feature rows for a JSON Lines file.
pub fn features_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("features.bin")
}

fn cards_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("cards.bin")
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path, expected_rows: usize) -> Result<Option<Vec<Option<Vec<f32>>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let (_, rows) = read_f32_rows(path, FEATURE_MAGIC)?;
    if rows.len() != expected_rows {
        return Err(Error::format(path, format!("{} rows for {expected_rows} records", rows.len())));
    }
    Ok(Some(rows))
}

fn write_sidecar(path: &Path, rows: &[Option<Vec<f32>>]) -> Result<()> {
    let Some(cols) = rows.iter().flatten().map(Vec::len).next() else {
        return Ok(());
    };
    let refs: Vec<Option<&[f32]>> = rows.iter().map(|r| r.as_deref()).collect();
    write_f32_rows(path, FEATURE_MAGIC, cols, &refs)
}

fn load_models(path: &Path) -> Result<Vec<ModelRecord>> {
    let lines: Vec<ModelLine> = read_jsonl(path)?;
    let cards = read_sidecar(&cards_path(path), lines.len())?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let record = ModelRecord {
                id: l.model_name,
                domain: l.domain,
                family: l.model_family,
                card_features: cards.as_ref().and_then(|c| c[i].clone()),
                created_at: l.created_at,
            };
            record.validate().map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(record)
        })
        .collect()
}

struct RecordFile {
    path: PathBuf,
    records: Vec<DatasetRecord>,
}

fn load_records(path: &Path, allow_empty: bool) -> Result<RecordFile> {
    let mut records: Vec<DatasetRecord> = read_jsonl(path)?;
    if records.is_empty() && !allow_empty {
        return Err(Error::format(path, "no records"));
    }
    if let Some(rows) = read_sidecar(&features_path(path), records.len())? {
        for (r, row) in records.iter_mut().zip(rows) {
            if r.features.is_none() {
                r.features = row.map(|v| v.into_iter().map(f64::from).collect());
            }
        }
    }
    Ok(RecordFile {
        path: path.to_path_buf(),
        records,
    })
}

/// Resolves records against the registry; unknown models are registered
/// when `auto_register` is set.
fn to_examples(
    file: RecordFile,
    registry: &mut Registry,
    introduced: &mut Vec<ModelRecord>,
    auto_register: bool,
    opts: &LoadOptions,
    dim: &mut Option<usize>,
) -> Result<Vec<Example>> {
    let schema = |line: usize, message: String| Error::Schema {
        path: file.path.clone(),
        line,
        message,
    };
    let mut out = Vec::with_capacity(file.records.len());
    for (n, rec) in file.records.into_iter().enumerate() {
        let line = n + 1;
        let gold = match registry.lookup(&rec.model_name) {
            Some(i) => i,
            None if auto_register => {
                let mut record = ModelRecord::new(rec.model_name.clone(), rec.domain.clone());
                record.family = rec.model_family.clone();
                record.created_at = rec.created_at;
                let (next, idx) = registry.register_models(std::slice::from_ref(&record)).map_err(|e| schema(line, e.to_string()))?;
                *registry = next;
                introduced.push(record);
                idx[0]
            }
            None => return Err(schema(line, format!("model {} is not registered by this point of the stream", rec.model_name))),
        };
        let known = registry.record(gold)?;
        if known.domain != rec.domain {
            return Err(schema(
                line,
                format!("domain {:?} disagrees with registered domain {:?} for {}", rec.domain, known.domain, rec.model_name),
            ));
        }
        let features = match rec.features {
            Some(f) => f,
            None => featurize(&rec.instruction, opts.feature_dim, opts.featurize_seed).map_err(|e| schema(line, e.to_string()))?,
        };
        match *dim {
            None => *dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(schema(line, format!("feature dimension {} differs from {d}", features.len())));
            }
            _ => {}
        }
        let mut ex = Example::new(features, gold, rec.domain);
        ex.instruction = Some(rec.instruction);
        out.push(ex);
    }
    Ok(out)
}

/// Per-model holdout of the evaluation fraction.
fn split_by_model(examples: Vec<Example>, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut by_model: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_model.entry(ex.gold).or_default().push(i);
    }
    let mut held = vec![false; examples.len()];
    for (model, mut idx) in by_model {
        if idx.len() < 2 {
            continue;
        }
        let n_eval = ((EVAL_FRACTION * idx.len() as f64).round() as usize).max(1);
        idx.shuffle(&mut rng::seeded(rng::derive(seed, &[model as u64])));
        idx[..n_eval].iter().for_each(|&i| held[i] = true);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (ex, h) in examples.into_iter().zip(held) {
        if h {
            eval.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, eval)
}

/// Loads the dataset described by `manifest` (a file, or a directory holding
/// `manifest.json`).
pub fn load_dataset(manifest: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let manifest_path = if manifest.is_dir() { manifest.join(MANIFEST_FILE) } else { manifest.to_path_buf() };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let doc: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if doc.experiences.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no experiences"));
    }
    let mut registry = Registry::new();
    let mut dim = None;
    let mut experiences = Vec::with_capacity(doc.experiences.len());
    for (t, entry) in doc.experiences.iter().enumerate() {
        let mut introduced = Vec::new();
        if let Some(models_file) = &entry.new_models_file {
            let path = root.join(models_file);
            let models = load_models(&path)?;
            let (next, _) = registry.register_models(&models).map_err(|e| Error::format(&path, e.to_string()))?;
            registry = next;
            introduced = models;
        }
        let auto = entry.new_models_file.is_none();
        let train = load_records(&root.join(&entry.file), false)?;
        let train = to_examples(train, &mut registry, &mut introduced, auto, opts, &mut dim)?;
        let (train, eval) = match &entry.eval_file {
            Some(f) => {
                let eval = load_records(&root.join(f), true)?;
                (train, to_examples(eval, &mut registry, &mut introduced, auto, opts, &mut dim)?)
            }
            None => split_by_model(train, rng::derive(opts.split_seed, &[t as u64])),
        };
        experiences.push(Experience {
            label: entry.label.clone(),
            train,
            eval,
            new_models: introduced,
        });
    }
    Ok(Dataset { registry, experiences })
}

fn records_of(examples: &[Example], registry: &Registry) -> Result<(Vec<DatasetRecord>, Vec<Option<Vec<f32>>>)> {
    let mut records = Vec::with_capacity(examples.len());
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let record = registry.record(ex.gold)?;
        records.push(DatasetRecord {
            instruction: ex.instruction.clone().unwrap_or_default(),
            model_name: record.id.clone(),
            domain: ex.domain.clone(),
            model_family: record.family.clone(),
            features: None,
            created_at: record.created_at,
        });
        rows.push(Some(ex.features.iter().map(|&v| v as f32).collect()));
    }
    Ok((records, rows))
}

/// Writes `experiences` under `dir` with a manifest and feature sidecars.
/// Features are stored as 32-bit floats.
pub fn save_dataset(dir: &Path, experiences: &[Experience]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut registry = Registry::new();
    let mut entries = Vec::with_capacity(experiences.len());
    for (t, exp) in experiences.iter().enumerate() {
        registry = registry.register_models(&exp.new_models)?.0;
        let stem = format!("exp{}", t + 1);
        let entry = ManifestEntry {
            label: exp.label.clone(),
            file: format!("{stem}.jsonl"),
            eval_file: Some(format!("{stem}_eval.jsonl")),
            new_models_file: Some(format!("{stem}_models.jsonl")),
        };
        for (file, examples) in [(&entry.file, &exp.train), (entry.eval_file.as_ref().expect("set above"), &exp.eval)] {
            let path = dir.join(file);
            let (records, rows) = records_of(examples, &registry)?;
            write_jsonl(&path, &records)?;
            write_sidecar(&features_path(&path), &rows)?;
        }
        let models_path = dir.join(entry.new_models_file.as_ref().expect("set above"));
        let lines: Vec<ModelLine> = exp
            .new_models
            .iter()
            .map(|r| ModelLine {
                model_name: r.id.clone(),
                domain: r.domain.clone(),
                model_family: r.family.clone(),
                created_at: r.created_at,
            })
            .collect();
        write_jsonl(&models_path, &lines)?;
        let cards: Vec<Option<Vec<f32>>> = exp.new_models.iter().map(|r| r.card_features.clone()).collect();
        write_sidecar(&cards_path(&models_path), &cards)?;
        entries.push(entry);
    }
    let manifest = serde_json::to_string_pretty(&Manifest { experiences: entries })? + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
