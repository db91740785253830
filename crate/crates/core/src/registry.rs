//! Append-only registry of model identities.
//!
//! Every model gets a stable integer index the first time it is registered.
//! Indices are never reused or reassigned, so router embedding rows stay
//! attached to the same model across experiences.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::{self, FEATURE_MAGIC};

/// Tolerance on the unit norm of card feature vectors.
pub const CARD_NORM_TOLERANCE: f64 = 1e-6;

/// A model identifier in `owner/repo_id` form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelId(String);

impl ModelId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        let mut parts = value.split('/');
        let valid = match (parts.next(), parts.next(), parts.next()) {
            (Some(owner), Some(repo), None) => !owner.is_empty() && !repo.is_empty(),
            _ => false,
        };
        if valid {
            Ok(ModelId(value))
        } else {
            Err(Error::MalformedModelId(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn owner(&self) -> &str {
        self.0.split_once('/').map(|(o, _)| o).unwrap_or_default()
    }

    /// The repository segment after the `/`.
    pub fn repo(&self) -> &str {
        self.0.split_once('/').map(|(_, r)| r).unwrap_or_default()
    }
}

impl TryFrom<String> for ModelId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        ModelId::new(value)
    }
}

impl From<ModelId> for String {
    fn from(id: ModelId) -> String {
        id.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::new(s)
    }
}

/// Metadata for one registered model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub id: ModelId,
    pub domain: String,
    pub family: Option<String>,
    /// Unit-norm card embedding, used by the retrieval baseline and soft targets.
    pub card_features: Option<Vec<f32>>,
    pub created_at: Option<i64>,
}

impl ModelRecord {
    pub fn new(id: ModelId, domain: impl Into<String>) -> Self {
        ModelRecord {
            id,
            domain: domain.into(),
            family: None,
            card_features: None,
            created_at: None,
        }
    }

    pub fn with_family(mut self, family: impl Into<String>) -> Self {
        self.family = Some(family.into());
        self
    }

    pub fn with_card_features(mut self, features: Vec<f32>) -> Self {
        self.card_features = Some(features);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.is_empty() {
            return Err(Error::InvalidRecord {
                id: self.id.to_string(),
                reason: "empty domain".into(),
            });
        }
        if let Some(card) = &self.card_features {
            let norm = card.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > CARD_NORM_TOLERANCE {
                return Err(Error::InvalidRecord {
                    id: self.id.to_string(),
                    reason: format!("card features have norm {norm}, expected 1"),
                });
            }
        }
        Ok(())
    }
}

/// Immutable registry snapshot; registration returns a new value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    records: Vec<ModelRecord>,
    index_of: HashMap<ModelId, usize>,
    version: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Incremented once per registration call that appends at least one record.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn records(&self) -> &[ModelRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> Result<&ModelRecord> {
        self.records.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    pub fn lookup(&self, id: &ModelId) -> Option<usize> {
        self.index_of.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Result<&ModelId> {
        self.record(index).map(|r| &r.id)
    }

    pub fn domain(&self, index: usize) -> Result<&str> {
        self.record(index).map(|r| r.domain.as_str())
    }

    /// Registers `new_records`, returning the new registry and one index per input.
    ///
    /// Records already present keep their index. Re-registering an id with a
    /// different domain, or a different explicit family, is rejected.
    pub fn register_models(&self, new_records: &[ModelRecord]) -> Result<(Registry, Vec<usize>)> {
        let mut next = self.clone();
        let mut indices = Vec::with_capacity(new_records.len());
        let mut appended = false;
        for record in new_records {
            record.validate()?;
            if let Some(&index) = next.index_of.get(&record.id) {
                let existing = &next.records[index];
                if existing.domain != record.domain {
                    return Err(Error::ConflictingRecord {
                        id: record.id.to_string(),
                        field: "domain",
                    });
                }
                if let (Some(a), Some(b)) = (&existing.family, &record.family) {
                    if a != b {
                        return Err(Error::ConflictingRecord {
                            id: record.id.to_string(),
                            field: "family",
                        });
                    }
                }
                indices.push(index);
            } else {
                let index = next.records.len();
                next.index_of.insert(record.id.clone(), index);
                next.records.push(record.clone());
                indices.push(index);
                appended = true;
            }
        }
        if appended {
            next.version += 1;
        }
        Ok((next, indices))
    }

    /// Fills missing family labels from `family_of`; existing labels win.
    pub fn with_families(&self, family_of: impl Fn(&ModelId) -> Option<String>) -> Registry {
        let mut next = self.clone();
        for record in &mut next.records {
            if record.family.is_none() {
                record.family = family_of(&record.id);
            }
        }
        next
    }

    /// Indices of all models in `domain`, ascending.
    pub fn indices_in_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.domain == domain)
            .map(|(i, _)| i)
    }

    /// Sidecar path holding card features for the registry document at `path`.
    pub fn cards_path(path: &Path) -> PathBuf {
        path.with_extension("cards.bin")
    }

    /// Writes the JSON document and, if any record has card features, the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = RegistryDocument {
            version: self.version,
            records: self.records.iter().map(RecordEntry::from).collect(),
        };
        let json = serde_json::to_string_pretty(&doc)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
        let cards_path = Self::cards_path(path);
        if let Some(cols) = self.card_dim()? {
            let rows: Vec<Option<&[f32]>> = self
                .records
                .iter()
                .map(|r| r.card_features.as_deref())
                .collect();
            matrix_io::write_f32_rows(&cards_path, FEATURE_MAGIC, cols, &rows)?;
        } else if cards_path.exists() {
            fs::remove_file(&cards_path).map_err(|e| Error::io(&cards_path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Registry> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: RegistryDocument =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let cards_path = Self::cards_path(path);
        let cards = if cards_path.exists() {
            let (_, rows) = matrix_io::read_f32_rows(&cards_path, FEATURE_MAGIC)?;
            if rows.len() != doc.records.len() {
                return Err(Error::format(
                    &cards_path,
                    format!("{} card rows for {} records", rows.len(), doc.records.len()),
                ));
            }
            rows
        } else {
            vec![None; doc.records.len()]
        };
        let mut registry = Registry {
            version: doc.version,
            ..Registry::default()
        };
        for (entry, card) in doc.records.into_iter().zip(cards) {
            let record = ModelRecord {
                id: entry.id,
                domain: entry.domain,
                family: entry.family,
                card_features: card,
                created_at: entry.created_at,
            };
            record.validate()?;
            if registry.index_of.contains_key(&record.id) {
                return Err(Error::format(path, format!("duplicate id {}", record.id)));
            }
            registry.index_of.insert(record.id.clone(), registry.records.len());
            registry.records.push(record);
        }
        Ok(registry)
    }

    fn card_dim(&self) -> Result<Option<usize>> {
        let mut dim = None;
        for record in &self.records {
            if let Some(card) = &record.card_features {
                match dim {
                    None => dim = Some(card.len()),
                    Some(d) if d != card.len() => {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: card.len(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(dim)
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryDocument {
    version: u64,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RecordEntry {
    pub(crate) id: ModelId,
    pub(crate) domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) created_at: Option<i64>,
}

impl From<&ModelRecord> for RecordEntry {
    fn from(r: &ModelRecord) -> Self {
        RecordEntry {
            id: r.id.clone(),
            domain: r.domain.clone(),
            family: r.family.clone(),
            created_at: r.created_at,
        }
    }
}
