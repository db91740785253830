//! Strategy runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::dataset::load_dataset;
use super::generate::generate_benchmark;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, Metric, Report};
use crate::registry::Registry;
use crate::replay::{QueryFeatures, ReplayConfig};
use crate::router::{rank, RouterState, NORM_EPS};
use crate::sampling::SamplingConfig;
use crate::training::{
    evaluate, evaluate_with, run_stream, stream_families, train_experience, DataMode, EvalScores, Example, Experience,
    ReplayPolicy, StreamOptions, TrainConfig, TrainLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Coreset replay with both anchors.
    Carve,
    /// Plain fine-tuning, no replay, no anchors.
    Sequential,
    RandomReplay,
    /// Coreset replay without anchors.
    CoresetReplay,
    CarveNoEmbAnchor,
    CarveNoProjAnchor,
    /// One router trained on the union of experiences so far.
    Cumulative,
    /// A fresh router per experience, trained on the union so far.
    FromScratch,
    /// One router trained once on everything.
    Joint,
    /// Query-to-card cosine over the registry, no training.
    RetrievalOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Carve,
        Strategy::Sequential,
        Strategy::RandomReplay,
        Strategy::CoresetReplay,
        Strategy::CarveNoEmbAnchor,
        Strategy::CarveNoProjAnchor,
        Strategy::Cumulative,
        Strategy::FromScratch,
        Strategy::Joint,
        Strategy::RetrievalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Carve => "carve",
            Strategy::Sequential => "sequential",
            Strategy::RandomReplay => "random_replay",
            Strategy::CoresetReplay => "coreset_replay",
            Strategy::CarveNoEmbAnchor => "carve_no_emb_anchor",
            Strategy::CarveNoProjAnchor => "carve_no_proj_anchor",
            Strategy::Cumulative => "cumulative",
            Strategy::FromScratch => "from_scratch",
            Strategy::Joint => "joint",
            Strategy::RetrievalOnly => "retrieval_only",
        }
    }

    /// Training configuration and stream options implied by the strategy.
    fn plan(self, train: &TrainConfig, replay: &ReplayConfig) -> Result<(TrainConfig, StreamOptions)> {
        let mut cfg = train.clone();
        let unanchored = |c: &mut TrainConfig| {
            c.lambda_emb = 0.0;
            c.lambda_proj = 0.0;
        };
        let coreset = ReplayPolicy::Coreset(replay.clone());
        let (policy, data) = match self {
            Strategy::Carve => (coreset, DataMode::Sequential),
            Strategy::Sequential => {
                unanchored(&mut cfg);
                (ReplayPolicy::None, DataMode::Sequential)
            }
            Strategy::RandomReplay => {
                unanchored(&mut cfg);
                let ratio = replay
                    .replay_ratio
                    .ok_or_else(|| Error::InvalidConfig("random_replay needs replay_ratio".into()))?;
                (ReplayPolicy::Random { ratio }, DataMode::Sequential)
            }
            Strategy::CoresetReplay => {
                unanchored(&mut cfg);
                (coreset, DataMode::Sequential)
            }
            Strategy::CarveNoEmbAnchor => {
                cfg.lambda_emb = 0.0;
                (coreset, DataMode::Sequential)
            }
            Strategy::CarveNoProjAnchor => {
                cfg.lambda_proj = 0.0;
                (coreset, DataMode::Sequential)
            }
            Strategy::Cumulative => {
                unanchored(&mut cfg);
                (ReplayPolicy::None, DataMode::Cumulative)
            }
            Strategy::FromScratch | Strategy::Joint | Strategy::RetrievalOnly => {
                unanchored(&mut cfg);
                (ReplayPolicy::None, DataMode::FromScratch)
            }
        };
        Ok((cfg, StreamOptions { replay: policy, data }))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::UnknownStrategy {
            name: s.to_string(),
            valid: Strategy::ALL.map(Strategy::name).join(", "),
        })
    }
}

/// Predicts, for each query, the model whose card features have the highest
/// cosine with the query features. Ties go to the smallest index.
pub fn retrieval_baseline(registry: &Registry, queries: &[Example]) -> Result<Vec<usize>> {
    let cards = card_matrix(registry)?;
    queries.iter().map(|q| Ok(rank_by_cards(&cards, &q.features)?[0])).collect()
}

fn card_matrix(registry: &Registry) -> Result<Vec<Vec<f64>>> {
    registry
        .records()
        .iter()
        .map(|r| {
            r.card_features
                .as_ref()
                .map(|c| c.iter().map(|&v| f64::from(v)).collect())
                .ok_or_else(|| Error::MissingCardFeatures(r.id.to_string()))
        })
        .collect()
}

fn rank_by_cards(cards: &[Vec<f64>], query: &[f64]) -> Result<Vec<usize>> {
    let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > NORM_EPS) {
        return Err(Error::DegenerateQuery);
    }
    let mut scores = Vec::with_capacity(cards.len());
    for card in cards {
        if card.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: card.len(),
                got: query.len(),
            });
        }
        scores.push(card.iter().zip(query).map(|(c, q)| c * q).sum::<f64>() / norm);
    }
    let all: Vec<usize> = (0..cards.len()).collect();
    Ok(rank(&all, &scores, 3).into_iter().map(|(m, _)| m).collect())
}

/// One seed's result.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub matrices: BTreeMap<Metric, AccuracyMatrix>,
    /// Final router, absent for the retrieval baseline.
    pub state: Option<RouterState>,
    pub registry: Registry,
    pub logs: Vec<TrainLog>,
}

fn push_rows(matrices: &mut BTreeMap<Metric, AccuracyMatrix>, rows: &[EvalScores]) -> Result<()> {
    for metric in Metric::ALL {
        matrices
            .entry(metric)
            .or_default()
            .push_row(rows.iter().map(|r| r[&metric]).collect())?;
    }
    Ok(())
}

/// Runs one strategy on one seed.
pub fn run_strategy(
    strategy: Strategy,
    experiences: &[Experience],
    train: &TrainConfig,
    sampling: &SamplingConfig,
    replay: &ReplayConfig,
    seed: u64,
) -> Result<RunResult> {
    if experiences.is_empty() {
        return Err(Error::InvalidConfig("no experiences to run".into()));
    }
    let (mut cfg, options) = strategy.plan(train, replay)?;
    cfg.seed = seed;
    let families = stream_families(experiences);
    match strategy {
        Strategy::RetrievalOnly => {
            let mut registry = Registry::new();
            let mut matrices = BTreeMap::new();
            for t in 0..experiences.len() {
                registry = registry.register_models(&experiences[t].new_models)?.0;
                let cards = card_matrix(&registry)?;
                let rows: Vec<EvalScores> = experiences[..=t]
                    .iter()
                    .map(|e| evaluate_with(&registry, &families, &e.eval, |ex| rank_by_cards(&cards, &ex.features)))
                    .collect::<Result<_>>()?;
                push_rows(&mut matrices, &rows)?;
            }
            Ok(RunResult {
                seed,
                matrices,
                state: None,
                registry,
                logs: Vec::new(),
            })
        }
        Strategy::Joint => {
            let dim = experiences
                .iter()
                .flat_map(|e| &e.train)
                .map(|x| x.features.len())
                .next()
                .ok_or_else(|| Error::InvalidConfig("no training examples".into()))?;
            let union = Experience {
                label: "Joint".into(),
                train: experiences.iter().flat_map(|e| e.train.iter().cloned()).collect(),
                eval: Vec::new(),
                new_models: experiences.iter().flat_map(|e| e.new_models.iter().cloned()).collect(),
            };
            let start = RouterState::new(dim, cfg.embed_dim, 0, cfg.tau, seed)?;
            let out = train_experience(&start, &Registry::new(), &union, &[], &cfg, sampling, 0)?;
            let scores: Vec<EvalScores> = experiences
                .iter()
                .map(|e| evaluate(&out.state, &out.registry, &families, &e.eval))
                .collect::<Result<_>>()?;
            let mut matrices = BTreeMap::new();
            for t in 0..experiences.len() {
                push_rows(&mut matrices, &scores[..=t])?;
            }
            Ok(RunResult {
                seed,
                matrices,
                state: Some(out.state),
                registry: out.registry,
                logs: vec![out.log],
            })
        }
        _ => {
            let out = run_stream(experiences, &cfg, sampling, &options, &QueryFeatures)?;
            Ok(RunResult {
                seed,
                matrices: out.matrices,
                state: Some(out.state),
                registry: out.registry,
                logs: out.logs,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: Report,
    pub runs: Vec<RunResult>,
}

impl ExperimentOutput {
    /// Writes the report files, per-step training logs and the first seed's
    /// router with its registry.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.report.write_to(dir)?;
        let logs = dir.join("logs");
        for run in &self.runs {
            for (t, log) in run.logs.iter().enumerate() {
                fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
                let path = logs.join(format!("seed{}_exp{}.jsonl", run.seed, t + 1));
                let mut buf = Vec::new();
                log.write_jsonl(&mut buf).map_err(|e| Error::io(&path, e))?;
                fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            }
        }
        if let Some(run) = self.runs.first() {
            if let Some(state) = &run.state {
                state.save(&dir.join("router.bin"))?;
            }
            run.registry.save(&dir.join("registry.json"))?;
        }
        Ok(())
    }
}

/// The configured dataset, or the generated benchmark when none is given.
pub fn load_experiences(cfg: &ExperimentConfig) -> Result<Vec<Experience>> {
    match &cfg.dataset {
        Some(path) => Ok(load_dataset(path, &cfg.load)?.experiences),
        None => Ok(generate_benchmark(&cfg.bench)?.experiences),
    }
}

/// Runs every configured seed (in parallel) and aggregates the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let experiences = load_experiences(cfg)?;
    run_experiment_on(cfg, &experiences)
}

/// Like [`run_experiment`], on experiences already in memory.
pub fn run_experiment_on(cfg: &ExperimentConfig, experiences: &[Experience]) -> Result<ExperimentOutput> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let runs: Vec<RunResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_strategy(cfg.strategy, experiences, &cfg.train, &cfg.sampling, &cfg.replay, seed))
        .collect::<Result<_>>()?;
    let matrices: Vec<BTreeMap<Metric, AccuracyMatrix>> = runs.iter().map(|r| r.matrices.clone()).collect();
    let labels = experiences.iter().map(|e| e.label.clone()).collect();
    let report = Report::from_runs(cfg.strategy.name(), &cfg.seeds, labels, &matrices)?;
    Ok(ExperimentOutput { report, runs })
}

/// Loads a configuration file, runs it and writes outputs to its `out`
/// directory when one is set.
pub fn run_experiment_file(path: &Path) -> Result<ExperimentOutput> {
    let cfg = ExperimentConfig::load(path)?;
    let output = run_experiment(&cfg)?;
    if let Some(out) = &cfg.out {
        output.write_to(out)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ModelId, ModelRecord};

    fn registry_with_cards(cards: &[[f32; 2]]) -> Registry {
        let recs: Vec<ModelRecord> = cards
            .iter()
            .enumerate()
            .map(|(i, c)| ModelRecord::new(ModelId::new(format!("r/m{i}")).unwrap(), "d").with_card_features(c.to_vec()))
            .collect();
        Registry::new().register_models(&recs).unwrap().0
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        let err = "nope".parse::<Strategy>().unwrap_err().to_string();
        assert!(err.contains("retrieval_only") && err.contains("carve"));
    }

    #[test]
    fn retrieval_picks_highest_cosine() {
        let angles = [84.26f32, 36.87, 72.54];
        let cards: Vec<[f32; 2]> = angles.iter().map(|a| [a.to_radians().cos(), a.to_radians().sin()]).collect();
        let reg = registry_with_cards(&cards);
        let q = Example::new(vec![1.0, 0.0], 0, "d");
        assert_eq!(retrieval_baseline(&reg, &[q]).unwrap(), vec![1]);
    }

    #[test]
    fn retrieval_tie_goes_to_smallest_index() {
        let reg = registry_with_cards(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]);
        let q = Example::new(vec![0.0, 1.0], 0, "d");
        assert_eq!(retrieval_baseline(&reg, &[q.clone()]).unwrap(), vec![0]);
        let exact = Example::new(vec![-1.0, 0.0], 0, "d");
        assert_eq!(retrieval_baseline(&reg, &[exact]).unwrap(), vec![1]);
    }

    #[test]
    fn retrieval_requires_cards() {
        let reg = Registry::new()
            .register_models(&[ModelRecord::new(ModelId::new("r/x").unwrap(), "d")])
            .unwrap()
            .0;
        assert!(matches!(
            retrieval_baseline(&reg, &[Example::new(vec![1.0], 0, "d")]),
            Err(Error::MissingCardFeatures(_))
        ));
    }
}
