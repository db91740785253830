//! Results reports: JSON per metric plus a table-shaped CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{aggregate, forgetting, AccuracyMatrix, Metric};
use crate::error::{Error, Result};

/// All quantities derived from one accuracy matrix, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub matrix: Vec<Vec<f64>>,
    pub per_t_forgetting: Vec<f64>,
    pub mean_forgetting: Option<f64>,
    pub column_means: Vec<f64>,
    pub overall_mean: Option<f64>,
}

impl MetricSummary {
    pub fn from_matrix(matrix: &AccuracyMatrix) -> MetricSummary {
        let pct = matrix.to_percent();
        let (per_t_forgetting, mean_forgetting) = forgetting(&pct);
        let (column_means, overall_mean) = aggregate(&pct);
        MetricSummary {
            matrix: pct.rows().to_vec(),
            per_t_forgetting,
            mean_forgetting,
            column_means,
            overall_mean,
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        v.extend(&self.per_t_forgetting);
        v.extend(self.mean_forgetting);
        v.extend(&self.column_means);
        v.extend(self.overall_mean);
        v
    }

    fn unflatten(&self, values: &[f64]) -> MetricSummary {
        let mut it = values.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let matrix = self.matrix.iter().map(|r| take(r.len())).collect();
        let per_t_forgetting = take(self.per_t_forgetting.len());
        let mean_forgetting = self.mean_forgetting.and(take(1).first().copied());
        let column_means = take(self.column_means.len());
        let overall_mean = self.overall_mean.and(take(1).first().copied());
        MetricSummary {
            matrix,
            per_t_forgetting,
            mean_forgetting,
            column_means,
            overall_mean,
        }
    }
}

/// Mean over seeds, with the sample standard deviation when there is more
/// than one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    #[serde(flatten)]
    pub mean: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricSummary>,
}

impl MetricEntry {
    pub fn from_runs(matrices: &[&AccuracyMatrix]) -> Result<MetricEntry> {
        let summaries: Vec<MetricSummary> = matrices.iter().map(|m| MetricSummary::from_matrix(m)).collect();
        let first = summaries
            .first()
            .ok_or_else(|| Error::InvalidConfig("report needs at least one run".into()))?;
        let flats: Vec<Vec<f64>> = summaries.iter().map(MetricSummary::flatten).collect();
        if flats.iter().any(|f| f.len() != flats[0].len()) {
            return Err(Error::InvalidConfig("runs have different numbers of experiences".into()));
        }
        let n = flats.len() as f64;
        let mean: Vec<f64> = (0..flats[0].len()).map(|i| flats.iter().map(|f| f[i]).sum::<f64>() / n).collect();
        let std = (flats.len() > 1).then(|| {
            let sd: Vec<f64> = (0..mean.len())
                .map(|i| (flats.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
                .collect();
            first.unflatten(&sd)
        });
        Ok(MetricEntry {
            mean: first.unflatten(&mean),
            std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub strategy: String,
    pub seeds: Vec<u64>,
    /// Experience labels in stream order.
    pub experiences: Vec<String>,
    pub metrics: BTreeMap<Metric, MetricEntry>,
}

impl Report {
    /// Combines per-seed matrix sets into one report.
    pub fn from_runs(
        strategy: &str,
        seeds: &[u64],
        experiences: Vec<String>,
        runs: &[BTreeMap<Metric, AccuracyMatrix>],
    ) -> Result<Report> {
        let mut metrics = BTreeMap::new();
        let keys: Vec<Metric> = runs.first().map(|r| r.keys().copied().collect()).unwrap_or_default();
        for metric in keys {
            let ms: Vec<&AccuracyMatrix> = runs
                .iter()
                .map(|r| r.get(&metric).ok_or_else(|| Error::InvalidConfig(format!("run is missing metric {metric}"))))
                .collect::<Result<_>>()?;
            metrics.insert(metric, MetricEntry::from_runs(&ms)?);
        }
        Ok(Report {
            strategy: strategy.to_string(),
            seeds: seeds.to_vec(),
            experiences,
            metrics,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Table with rows `Trained(Exp 1..t)`, one column per experience, a
    /// forgetting column and a final `Mean` row.
    pub fn to_csv(&self, metric: Metric) -> Option<String> {
        let entry = self.metrics.get(&metric)?;
        let t = entry.mean.matrix.len();
        let cell = |mean: f64, std: Option<f64>| match std {
            Some(s) => format!("{mean:.2} ± {s:.2}"),
            None => format!("{mean:.2}"),
        };
        let sd = entry.std.as_ref();
        let mut out = String::from("trained");
        for k in 0..t {
            let _ = write!(out, ",Exp {}", k + 1);
        }
        out.push_str(",FGT\n");
        for (r, row) in entry.mean.matrix.iter().enumerate() {
            if r == 0 {
                out.push_str("Trained(Exp 1)");
            } else {
                let _ = write!(out, "Trained(Exp 1-{})", r + 1);
            }
            for k in 0..t {
                out.push(',');
                if let Some(v) = row.get(k) {
                    out.push_str(&cell(*v, sd.map(|s| s.matrix[r][k])));
                }
            }
            out.push(',');
            if r > 0 {
                out.push_str(&cell(entry.mean.per_t_forgetting[r - 1], sd.map(|s| s.per_t_forgetting[r - 1])));
            }
            out.push('\n');
        }
        out.push_str("Mean");
        for k in 0..t {
            out.push(',');
            out.push_str(&cell(entry.mean.column_means[k], sd.map(|s| s.column_means[k])));
        }
        out.push(',');
        if let Some(m) = entry.mean.mean_forgetting {
            out.push_str(&cell(m, sd.and_then(|s| s.mean_forgetting)));
        }
        out.push('\n');
        Some(out)
    }

    /// Writes `report.json` and one `report_<metric>.csv` per metric.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        for metric in self.metrics.keys() {
            let path = dir.join(format!("report_{metric}.csv"));
            let csv = self.to_csv(*metric).expect("metric present");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
