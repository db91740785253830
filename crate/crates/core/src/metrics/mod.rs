//! Evaluation: accuracy variants, model families, label snapping, forgetting
//! and table aggregation.

mod family;
mod report;
mod snap;

pub use family::{build_family_map, build_family_map_with, normalize_name, FamilyConfig, FamilyMap};
pub use report::{MetricEntry, MetricSummary, Report};
pub use snap::{levenshtein, similarity, snap_label, Snapped, SNAP_THRESHOLD};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{ModelId, Registry};

/// Lower-triangular grid: `A[t][k]` is the accuracy on experience `k` after
/// training through experience `t`, defined for `k <= t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    /// Builds a matrix from its rows; row `t` must hold `t + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(Error::DimensionMismatch {
                expected: t + 1,
                got: row.len(),
            });
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("accuracy entry {v} is not finite")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of experiences trained so far.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(k)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn scaled(&self, factor: f64) -> AccuracyMatrix {
        AccuracyMatrix {
            rows: self.rows.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect(),
        }
    }

    /// Fractions in `[0, 1]` rescaled to percentages.
    pub fn to_percent(&self) -> AccuracyMatrix {
        self.scaled(100.0)
    }
}

/// Per-step forgetting `FGT_t = mean_{k<t} (A[k][k] - A[t][k])` for
/// `t = 2..T`, and its mean. Empty with `None` when `T < 2`.
pub fn forgetting(matrix: &AccuracyMatrix) -> (Vec<f64>, Option<f64>) {
    let per_t: Vec<f64> = (1..matrix.len())
        .map(|t| {
            let drop: f64 = (0..t).map(|k| matrix.rows[k][k] - matrix.rows[t][k]).sum();
            drop / t as f64
        })
        .collect();
    let mean = (!per_t.is_empty()).then(|| per_t.iter().sum::<f64>() / per_t.len() as f64);
    (per_t, mean)
}

/// Column means over defined entries and the mean of those means.
pub fn aggregate(matrix: &AccuracyMatrix) -> (Vec<f64>, Option<f64>) {
    let t = matrix.len();
    let cols: Vec<f64> = (0..t)
        .map(|k| (k..t).map(|r| matrix.rows[r][k]).sum::<f64>() / (t - k) as f64)
        .collect();
    let overall = (!cols.is_empty()).then(|| cols.iter().sum::<f64>() / cols.len() as f64);
    (cols, overall)
}

fn check_pairs(preds: usize, golds: usize) -> Result<()> {
    if preds != golds {
        return Err(Error::DimensionMismatch {
            expected: golds,
            got: preds,
        });
    }
    if golds == 0 {
        return Err(Error::InvalidConfig("accuracy over an empty prediction set".into()));
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

/// Fraction of exact identifier matches.
pub fn model_accuracy(preds: &[ModelId], golds: &[ModelId]) -> Result<f64> {
    check_pairs(preds.len(), golds.len())?;
    Ok(fraction(preds.iter().zip(golds).filter(|(p, g)| p == g).count(), golds.len()))
}

/// Fraction of predictions whose domain matches the gold model's domain.
pub fn domain_accuracy(preds: &[ModelId], golds: &[ModelId], registry: &Registry) -> Result<f64> {
    check_pairs(preds.len(), golds.len())?;
    let domain = |id: &ModelId| -> Result<&str> {
        let i = registry.lookup(id).ok_or_else(|| Error::UnknownModel(id.to_string()))?;
        registry.domain(i)
    };
    let mut hits = 0;
    for (p, g) in preds.iter().zip(golds) {
        if domain(p)? == domain(g)? {
            hits += 1;
        }
    }
    Ok(fraction(hits, golds.len()))
}

/// Fraction of predictions in the gold model's family.
pub fn family_accuracy(preds: &[ModelId], golds: &[ModelId], families: &FamilyMap) -> Result<f64> {
    check_pairs(preds.len(), golds.len())?;
    let family = |id: &ModelId| families.get(id).ok_or_else(|| Error::UnknownModel(id.to_string()));
    let mut hits = 0;
    for (p, g) in preds.iter().zip(golds) {
        if family(p)? == family(g)? {
            hits += 1;
        }
    }
    Ok(fraction(hits, golds.len()))
}

/// Fraction of ranked lists whose first `k` entries contain a hit.
pub fn top_k_accuracy<F>(ranked: &[Vec<ModelId>], golds: &[ModelId], k: usize, hit: F) -> Result<f64>
where
    F: Fn(&ModelId, &ModelId) -> Result<bool>,
{
    check_pairs(ranked.len(), golds.len())?;
    let mut hits = 0;
    for (list, gold) in ranked.iter().zip(golds) {
        let mut found = false;
        for p in list.iter().take(k) {
            if hit(p, gold)? {
                found = true;
                break;
            }
        }
        hits += usize::from(found);
    }
    Ok(fraction(hits, golds.len()))
}

/// The accuracy variants tracked during a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Model,
    Family,
    Domain,
    ModelTop3,
    DomainTop3,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Model, Metric::Family, Metric::Domain, Metric::ModelTop3, Metric::DomainTop3];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Model => "model",
            Metric::Family => "family",
            Metric::Domain => "domain",
            Metric::ModelTop3 => "model_top3",
            Metric::DomainTop3 => "domain_top3",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        let alias = match key.as_str() {
            "m" => "model",
            "f" => "family",
            "d" => "domain",
            other => other,
        };
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric {s:?}; expected one of model, family, domain, model_top3, domain_top3")))
    }
}
