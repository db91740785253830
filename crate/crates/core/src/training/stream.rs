//! Running a whole experience stream and filling the accuracy matrices.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::trainer::{train_experience, TrainLog};
use super::{Example, Experience, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{build_family_map, AccuracyMatrix, FamilyMap, Metric};
use crate::registry::{ModelId, ModelRecord, Registry};
use crate::replay::{build_replay, random_replay, Featurizer, ReplayBuffer, ReplayConfig};
use crate::rng;
use crate::router::{rank, RouterState};
use crate::sampling::SamplingConfig;

/// How past experiences are replayed.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplayPolicy {
    None,
    /// Uniform sample of `floor(ratio * |past|)` examples.
    Random { ratio: f64 },
    Coreset(ReplayConfig),
}

/// What each experience trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataMode {
    /// Only the current experience, plus replay.
    #[default]
    Sequential,
    /// The union of all experiences so far, continuing from the previous state.
    Cumulative,
    /// The union of all experiences so far, from a fresh router each time.
    FromScratch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    pub replay: ReplayPolicy,
    pub data: DataMode,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            replay: ReplayPolicy::None,
            data: DataMode::Sequential,
        }
    }
}

/// Accuracy of one router on one evaluation split, per metric, as fractions.
pub type EvalScores = BTreeMap<Metric, f64>;

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub state: RouterState,
    pub registry: Registry,
    pub families: FamilyMap,
    pub matrices: BTreeMap<Metric, AccuracyMatrix>,
    pub logs: Vec<TrainLog>,
    pub replay_buffers: Vec<ReplayBuffer>,
}

/// Family ids for every model in the stream. Explicit record families win;
/// the rest are clustered from their names.
pub fn stream_families(experiences: &[Experience]) -> FamilyMap {
    let records: Vec<&ModelRecord> = experiences.iter().flat_map(|e| &e.new_models).collect();
    let unlabeled: Vec<ModelId> = records.iter().filter(|r| r.family.is_none()).map(|r| r.id.clone()).collect();
    let mut map = if unlabeled.is_empty() {
        FamilyMap::default()
    } else {
        build_family_map(&unlabeled)
    };
    for r in records {
        if let Some(f) = &r.family {
            map.insert(r.id.clone(), f.clone());
        }
    }
    map
}

/// Scores `examples` with the full registry as the candidate set.
pub fn evaluate(state: &RouterState, registry: &Registry, families: &FamilyMap, examples: &[Example]) -> Result<EvalScores> {
    let all: Vec<usize> = (0..registry.len()).collect();
    evaluate_with(registry, families, examples, |ex| {
        let scores = state.score_all(&ex.features)?;
        Ok(rank(&all, &scores, 3).into_iter().map(|(m, _)| m).collect())
    })
}

/// Accuracy of an arbitrary ranker, which returns its top three models
/// (best first) for each example.
pub fn evaluate_with<F>(registry: &Registry, families: &FamilyMap, examples: &[Example], ranker: F) -> Result<EvalScores>
where
    F: Fn(&Example) -> Result<Vec<usize>> + Sync,
{
    if examples.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let fam: Vec<&str> = registry
        .records()
        .iter()
        .map(|r| families.get(&r.id).ok_or_else(|| Error::UnknownModel(r.id.to_string())))
        .collect::<Result<_>>()?;
    let dom: Vec<&str> = registry.records().iter().map(|r| r.domain.as_str()).collect();

    let hits: Vec<[usize; 5]> = examples
        .par_iter()
        .map(|ex| -> Result<[usize; 5]> {
            let g = ex.gold;
            if g >= registry.len() {
                return Err(Error::IndexOutOfRange {
                    index: g,
                    len: registry.len(),
                });
            }
            let top = ranker(ex)?;
            let p = *top.first().ok_or_else(|| Error::InvalidConfig("ranker returned no models".into()))?;
            Ok([
                usize::from(p == g),
                usize::from(fam[p] == fam[g]),
                usize::from(dom[p] == dom[g]),
                usize::from(top.iter().take(3).any(|&m| m == g)),
                usize::from(top.iter().take(3).any(|&m| dom[m] == dom[g])),
            ])
        })
        .collect::<Result<_>>()?;
    let n = examples.len() as f64;
    Ok(Metric::ALL
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, hits.iter().map(|h| h[i]).sum::<usize>() as f64 / n))
        .collect())
}

fn feature_dim(experiences: &[Experience]) -> Result<usize> {
    experiences
        .iter()
        .flat_map(|e| e.train.iter().chain(&e.eval))
        .map(|ex| ex.features.len())
        .next()
        .ok_or_else(|| Error::InvalidConfig("stream has no examples".into()))
}

fn union_through(experiences: &[Experience], t: usize) -> Vec<Example> {
    experiences[..=t].iter().flat_map(|e| e.train.iter().cloned()).collect()
}

/// Trains on each experience in turn and evaluates on every split seen so far.
pub fn run_stream(
    experiences: &[Experience],
    cfg: &TrainConfig,
    sampling_cfg: &SamplingConfig,
    options: &StreamOptions,
    featurizer: &dyn Featurizer,
) -> Result<StreamOutcome> {
    let dim = feature_dim(experiences)?;
    let families = stream_families(experiences);
    let fresh = |seed: u64| RouterState::new(dim, cfg.embed_dim, 0, cfg.tau, seed);
    let mut state = fresh(cfg.seed)?;
    let mut registry = Registry::new();
    let mut matrices: BTreeMap<Metric, AccuracyMatrix> = Metric::ALL.iter().map(|&m| (m, AccuracyMatrix::new())).collect();
    let mut logs = Vec::with_capacity(experiences.len());
    let mut replay_buffers = Vec::new();

    for (t, exp) in experiences.iter().enumerate() {
        let outcome = match options.data {
            DataMode::Sequential => {
                let past = &experiences[..t];
                let buffer = match &options.replay {
                    _ if past.is_empty() => ReplayBuffer::default(),
                    ReplayPolicy::None => ReplayBuffer::default(),
                    ReplayPolicy::Random { ratio } => {
                        let pool: usize = past.iter().map(|e| e.train.len()).sum();
                        let budget = (ratio * pool as f64).floor() as usize;
                        random_replay(past, budget, rng::derive(cfg.seed, &[t as u64, 0x5252]))
                    }
                    ReplayPolicy::Coreset(rc) => {
                        let rc = ReplayConfig {
                            seed: rng::derive(rc.seed ^ cfg.seed, &[t as u64]),
                            ..rc.clone()
                        };
                        build_replay(past, &rc, featurizer)?
                    }
                };
                let replay = buffer.examples(past)?;
                let out = train_experience(&state, &registry, exp, &replay, cfg, sampling_cfg, t)?;
                replay_buffers.push(buffer);
                out
            }
            DataMode::Cumulative => {
                let merged = Experience {
                    train: union_through(experiences, t),
                    ..exp.clone()
                };
                train_experience(&state, &registry, &merged, &[], cfg, sampling_cfg, t)?
            }
            DataMode::FromScratch => {
                let merged = Experience {
                    label: exp.label.clone(),
                    train: union_through(experiences, t),
                    eval: Vec::new(),
                    new_models: experiences[..=t].iter().flat_map(|e| e.new_models.iter().cloned()).collect(),
                };
                let start = fresh(rng::derive(cfg.seed, &[t as u64, 0x4653]))?;
                train_experience(&start, &Registry::new(), &merged, &[], cfg, sampling_cfg, t)?
            }
        };
        state = outcome.state;
        registry = outcome.registry;
        logs.push(outcome.log);

        let rows: Vec<EvalScores> = experiences[..=t]
            .iter()
            .map(|e| evaluate(&state, &registry, &families, &e.eval))
            .collect::<Result<_>>()?;
        for (metric, matrix) in matrices.iter_mut() {
            matrix.push_row(rows.iter().map(|r| r[metric]).collect())?;
        }
    }
    Ok(StreamOutcome {
        state,
        registry,
        families,
        matrices,
        logs,
        replay_buffers,
    })
}
