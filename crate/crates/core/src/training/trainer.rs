//! Training on one experience.

use std::io::Write;

use serde::Serialize;

use super::loss::{loss_and_grads, BatchItem, Targets};
use super::optim::RouterOptimizer;
use super::{Example, Experience, TrainConfig};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng;
use crate::router::{RouterState, Snapshot};
use crate::sampling::{group_by_domain, make_batches, mine_hard_negatives, CandidateSampler, CandidateSet, HardNegativeCache, SamplingConfig};

/// One optimizer step, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub route: f64,
    pub emb_anchor: f64,
    pub proj_anchor: f64,
    pub total: f64,
    pub lr_proj: f64,
    pub lr_emb: f64,
    pub phase: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub experience: String,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: RouterState,
    pub registry: Registry,
    /// Anchor reference, present whenever the registry was non-empty on entry.
    pub snapshot: Option<Snapshot>,
    pub log: TrainLog,
}

/// Positions of the `k` candidates nearest the positive.
///
/// Nearness is cosine between card features when the positive and every
/// candidate carry them, otherwise cosine between current embedding rows.
pub fn soft_target_neighbors(state: &RouterState, registry: &Registry, set: &CandidateSet, k: usize) -> Result<Vec<usize>> {
    let gold = set.gold();
    let cards: Option<Vec<&[f32]>> = set
        .indices
        .iter()
        .map(|&m| registry.record(m).ok().and_then(|r| r.card_features.as_deref()))
        .collect();
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(set.indices.len());
    match cards {
        Some(cards) => {
            let g = cards[set.positive_pos];
            for (pos, c) in cards.iter().enumerate() {
                if pos != set.positive_pos {
                    let dot: f64 = g.iter().zip(c.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                    sims.push((pos, dot));
                }
            }
        }
        None => {
            let e = state.model_embedding(gold)?;
            for (pos, &m) in set.indices.iter().enumerate() {
                if pos != set.positive_pos {
                    sims.push((pos, e.dot(&state.model_embedding(m)?)));
                }
            }
        }
    }
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(set.indices[a.0].cmp(&set.indices[b.0])));
    Ok(sims.into_iter().take(k).map(|(p, _)| p).collect())
}

/// Trains the router on one experience.
///
/// Registers the experience's new models, expands the embedding table and,
/// when models were registered before this call, snapshots the incoming
/// state for anchoring. Replay examples are mixed into the stream and
/// flagged as replayed. Hard negatives are mined at the first step and every
/// `mining_every` steps after.
pub fn train_experience(
    state: &RouterState,
    registry: &Registry,
    exp: &Experience,
    replay: &[Example],
    cfg: &TrainConfig,
    sampling_cfg: &SamplingConfig,
    experience_index: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sampling_cfg.validate()?;
    if state.num_models() != registry.len() {
        return Err(Error::InvalidConfig(format!(
            "router has {} rows but the registry has {} models",
            state.num_models(),
            registry.len()
        )));
    }
    let t = experience_index as u64;
    let snapshot = (!registry.is_empty()).then(|| state.snapshot());

    let (registry, _) = registry.register_models(&exp.new_models)?;
    let mut state = state.expand_embeddings(registry.len() - state.num_models(), rng::derive(cfg.seed, &[t, 0x4558]));
    state.registry_version = registry.version();

    let stream: Vec<Example> = exp
        .train
        .iter()
        .cloned()
        .chain(replay.iter().cloned().map(|mut e| {
            e.from_replay = true;
            e
        }))
        .collect();
    for ex in &stream {
        registry.record(ex.gold)?;
    }

    let epochs = (0..cfg.epochs)
        .map(|epoch| make_batches(&stream, sampling_cfg, cfg.batch_size, rng::derive(cfg.seed, &[t, epoch as u64, 0x4241])))
        .collect::<Result<Vec<_>>>()?;
    let total_steps: usize = epochs.iter().map(Vec::len).sum();
    let phase1_steps = cfg
        .two_phase
        .map(|tp| (tp.phase1_fraction * total_steps as f64).ceil() as usize)
        .unwrap_or(total_steps);

    let sampler = CandidateSampler::new(&registry, sampling_cfg);
    let by_domain = group_by_domain(&stream);
    let mut optimizer = RouterOptimizer::new(cfg.optimizer);
    let mut cache = HardNegativeCache::default();
    let mut log = TrainLog {
        experience: exp.label.clone(),
        steps: Vec::with_capacity(total_steps),
    };

    let mut step = 0usize;
    for batches in &epochs {
        for batch in batches {
            if step == 0 || (sampling_cfg.mining_every > 0 && step % sampling_cfg.mining_every == 0) {
                cache = mine_hard_negatives(&state, &registry, &by_domain, sampling_cfg, step)?;
            }
            let in_phase1 = step < phase1_steps;
            let (lr_proj, lr_emb, phase) = match cfg.two_phase {
                Some(tp) if in_phase1 => (tp.phase1_lr_proj, tp.phase1_lr_emb, 1),
                Some(_) => (cfg.lr_proj, cfg.lr_emb, 2),
                None => (cfg.lr_proj, cfg.lr_emb, 1),
            };
            let anchors_on = match cfg.two_phase {
                Some(tp) if tp.anchors_phase1_only => in_phase1,
                _ => true,
            };

            let mut items = Vec::with_capacity(batch.len());
            for (pos, &i) in batch.iter().enumerate() {
                let ex = &stream[i];
                let seed = rng::derive(cfg.seed, &[t, step as u64, pos as u64, 0x4353]);
                let candidates = sampler.build(ex.gold, &ex.domain, &cache, seed)?;
                let targets = match cfg.soft_targets {
                    Some(st) if st.epsilon > 0.0 && st.k_neighbors > 0 => Targets::Soft {
                        epsilon: st.epsilon,
                        neighbors: soft_target_neighbors(&state, &registry, &candidates, st.k_neighbors)?,
                    },
                    _ => Targets::Hard,
                };
                items.push(BatchItem {
                    example: ex,
                    candidates,
                    targets,
                });
            }

            let anchor = snapshot.as_ref().filter(|_| anchors_on);
            let (breakdown, grads) = loss_and_grads(&state, anchor, &items, cfg)?;
            optimizer.step(&mut state, &grads, lr_proj, lr_emb)?;
            log.steps.push(StepLog {
                step,
                route: breakdown.route,
                emb_anchor: breakdown.emb_anchor,
                proj_anchor: breakdown.proj_anchor,
                total: breakdown.total,
                lr_proj,
                lr_emb,
                phase,
            });
            step += 1;
        }
    }
    state.check_finite()?;
    Ok(TrainOutcome {
        state,
        registry,
        snapshot,
        log,
    })
}
