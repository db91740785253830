//! Domain–model coreset replay.
//!
//! The replay budget is split across domains roughly in proportion to their
//! example counts, with a per-domain floor and optional cap. Inside each
//! domain a per-model cap limits how many examples any one model keeps, and
//! farthest-point sampling under cosine distance picks diverse examples.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng;
use crate::router::NORM_EPS;
use crate::training::{Example, Experience};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub replay_ratio: Option<f64>,
    /// Fixed budget; takes precedence over `replay_ratio`.
    pub replay_budget: Option<usize>,
    pub min_per_domain: usize,
    pub max_per_domain: Option<usize>,
    pub max_per_model: usize,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            replay_ratio: Some(0.1),
            replay_budget: None,
            min_per_domain: 5,
            max_per_domain: None,
            max_per_model: 3,
            seed: 0,
        }
    }
}

impl ReplayConfig {
    /// Total budget for a pool of `pool_size` past examples.
    pub fn budget(&self, pool_size: usize) -> Result<usize> {
        match (self.replay_budget, self.replay_ratio) {
            (Some(b), _) => Ok(b),
            (None, Some(r)) if r > 0.0 && r <= 1.0 => Ok((r * pool_size as f64).floor() as usize),
            (None, Some(r)) => Err(Error::InvalidConfig(format!("replay_ratio must lie in (0, 1], got {r}"))),
            (None, None) => Err(Error::InvalidConfig("either replay_ratio or replay_budget must be set".into())),
        }
    }
}

/// Per-domain quotas. `floors_trimmed` is set when the budget could not cover
/// every domain's floor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaAllocation {
    pub quotas: BTreeMap<String, usize>,
    pub floors_trimmed: bool,
}

/// Splits `budget` across domains.
///
/// Each domain gets `clamp(lambda * n_d, lo_d, hi_d)` for the single `lambda`
/// that spends the budget, where `lo_d = min(min_per_domain, n_d)` and
/// `hi_d = min(max_per_domain, n_d)`; the result is rounded by largest
/// remainder. This is the fixed point of proportional allocation followed by
/// clamping and proportional redistribution of the leftover.
pub fn compute_domain_quotas(
    counts: &BTreeMap<String, usize>,
    budget: usize,
    min_per_domain: usize,
    max_per_domain: Option<usize>,
) -> QuotaAllocation {
    let hi: Vec<usize> = counts.values().map(|&n| n.min(max_per_domain.unwrap_or(usize::MAX))).collect();
    let lo: Vec<usize> = counts.values().zip(&hi).map(|(&n, &h)| n.min(min_per_domain).min(h)).collect();
    let n: Vec<f64> = counts.values().map(|&n| n as f64).collect();
    let names: Vec<&String> = counts.keys().collect();
    let sum_lo: usize = lo.iter().sum();
    let sum_hi: usize = hi.iter().sum();

    let finish = |q: Vec<usize>, trimmed: bool| QuotaAllocation {
        quotas: names.iter().map(|s| (*s).clone()).zip(q).collect(),
        floors_trimmed: trimmed,
    };

    if budget < sum_lo {
        // trim floors one at a time, cycling from the largest domain down
        let mut q = lo.clone();
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| counts[names[b]].cmp(&counts[names[a]]).then(names[a].cmp(names[b])));
        let mut excess = sum_lo - budget;
        while excess > 0 {
            for &d in &order {
                if excess > 0 && q[d] > 0 {
                    q[d] -= 1;
                    excess -= 1;
                }
            }
        }
        return finish(q, true);
    }
    if budget >= sum_hi {
        return finish(hi, false);
    }

    let clamp = |lambda: f64, d: usize| (lambda * n[d]).clamp(lo[d] as f64, hi[d] as f64);
    let spent = |lambda: f64| (0..n.len()).map(|d| clamp(lambda, d)).sum::<f64>();
    let mut lo_l = 0.0;
    let mut hi_l = (0..n.len())
        .filter(|&d| n[d] > 0.0)
        .map(|d| hi[d] as f64 / n[d])
        .fold(0.0, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo_l + hi_l);
        if spent(mid) < budget as f64 {
            lo_l = mid;
        } else {
            hi_l = mid;
        }
    }
    let cont: Vec<f64> = (0..n.len()).map(|d| clamp(hi_l, d)).collect();
    let mut q: Vec<usize> = cont.iter().zip(&lo).map(|(c, &l)| (c.floor() as usize).max(l)).collect();
    for (qd, &h) in q.iter_mut().zip(&hi) {
        *qd = (*qd).min(h);
    }
    let mut assigned: usize = q.iter().sum();
    let mut order: Vec<usize> = (0..n.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (cont[a] - cont[a].floor(), cont[b] - cont[b].floor());
        fb.total_cmp(&fa).then(names[a].cmp(names[b]))
    });
    while assigned < budget {
        let before = assigned;
        for &d in &order {
            if assigned < budget && q[d] < hi[d] {
                q[d] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > budget {
        // bisection overshoot; remove from the smallest fractional parts
        let before = assigned;
        for &d in order.iter().rev() {
            if assigned > budget && q[d] > lo[d] {
                q[d] -= 1;
                assigned -= 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    finish(q, false)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Greedy farthest-point sampling under cosine distance `1 - <a, b>`.
///
/// With an empty `existing`, the first point is drawn uniformly from `seed`.
/// Otherwise distances are measured to `existing` plus everything selected
/// so far, and `existing` points are never returned. Ties go to the smallest
/// index.
pub fn fps<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, existing: &[usize]) -> Result<Vec<usize>> {
    let n = points.len();
    let mut taken = vec![false; n];
    for &e in existing {
        if e >= n {
            return Err(Error::IndexOutOfRange { index: e, len: n });
        }
        taken[e] = true;
    }
    let available = taken.iter().filter(|t| !**t).count();
    if k > available {
        return Err(Error::TooManyPoints { k, available });
    }
    let mut out = Vec::with_capacity(k);
    if k == 0 {
        return Ok(out);
    }
    let mut min_dist = vec![f64::INFINITY; n];
    let absorb = |p: usize, min_dist: &mut [f64]| {
        let anchor = points[p].as_ref();
        for (i, d) in min_dist.iter_mut().enumerate() {
            let dist = cosine_distance(points[i].as_ref(), anchor);
            if dist < *d {
                *d = dist;
            }
        }
    };
    for &e in existing {
        absorb(e, &mut min_dist);
    }
    if existing.is_empty() {
        let first = rng::seeded(seed).gen_range(0..n);
        taken[first] = true;
        out.push(first);
        absorb(first, &mut min_dist);
    }
    while out.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.map_or(true, |b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= available");
        taken[b] = true;
        out.push(b);
        absorb(b, &mut min_dist);
    }
    Ok(out)
}

/// Position of an example inside a sequence of experiences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ExampleRef {
    pub experience_index: usize,
    pub example_index: usize,
}

/// A past training example together with its replay feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub origin: ExampleRef,
    pub model: usize,
    pub domain: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEntry {
    pub origin: ExampleRef,
    pub model: usize,
    pub domain: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayBuffer {
    pub entries: Vec<ReplayEntry>,
    pub per_domain_counts: BTreeMap<String, usize>,
    pub per_model_counts: BTreeMap<usize, usize>,
    pub budget: usize,
    pub floors_trimmed: bool,
    /// Set when the diversity fill pushed some model past `max_per_model`.
    pub cap_overflow: bool,
}

impl ReplayBuffer {
    fn push(&mut self, item: &PoolItem) {
        *self.per_domain_counts.entry(item.domain.clone()).or_default() += 1;
        *self.per_model_counts.entry(item.model).or_default() += 1;
        self.entries.push(ReplayEntry {
            origin: item.origin,
            model: item.model,
            domain: item.domain.clone(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resolves entries against the experiences they were drawn from.
    pub fn examples(&self, past: &[Experience]) -> Result<Vec<Example>> {
        self.entries
            .iter()
            .map(|e| {
                let ex = past
                    .get(e.origin.experience_index)
                    .and_then(|x| x.train.get(e.origin.example_index))
                    .ok_or_else(|| Error::InvalidConfig(format!("dangling replay reference {:?}", e.origin)))?;
                let mut ex = ex.clone();
                ex.from_replay = true;
                Ok(ex)
            })
            .collect()
    }

    /// Audit export: one JSON object per entry.
    pub fn write_audit(&self, registry: &Registry, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            experience_index: usize,
            example_index: usize,
            model_name: &'a str,
            domain: &'a str,
        }
        for e in &self.entries {
            let line = Line {
                experience_index: e.origin.experience_index,
                example_index: e.origin.example_index,
                model_name: registry.id(e.model)?.as_str(),
                domain: &e.domain,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io("<replay audit>", e))?;
        }
        Ok(())
    }
}

/// Picks each domain's quota of examples from `pool`.
///
/// Per domain, every model first contributes up to `max_per_model` examples
/// in its own farthest-point order, taken round by round (first picks of all
/// models, then second picks, ...). A round that does not fit the remaining
/// quota is thinned by farthest-point sampling against what is already
/// chosen. Any quota left after that is filled by farthest-point sampling over
/// the whole domain, which is the only place the per-model cap can be exceeded.
pub fn select_coreset(pool: &[PoolItem], quotas: &BTreeMap<String, usize>, cfg: &ReplayConfig) -> ReplayBuffer {
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in pool.iter().enumerate() {
        by_domain.entry(item.domain.as_str()).or_default().push(i);
    }
    let mut buffer = ReplayBuffer {
        budget: quotas.values().sum(),
        ..ReplayBuffer::default()
    };
    for (domain, members) in by_domain {
        let quota = quotas.get(domain).copied().unwrap_or(0).min(members.len());
        if quota == 0 {
            continue;
        }
        let domain_seed = rng::derive_str(cfg.seed, domain);
        let points: Vec<&[f64]> = members.iter().map(|&i| pool[i].features.as_slice()).collect();

        let mut by_model: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (local, &i) in members.iter().enumerate() {
            by_model.entry(pool[i].model).or_default().push(local);
        }
        let ranked: Vec<Vec<usize>> = by_model
            .iter()
            .map(|(&model, locals)| {
                let pts: Vec<&[f64]> = locals.iter().map(|&l| points[l]).collect();
                let k = cfg.max_per_model.min(locals.len());
                fps(&pts, k, rng::derive(domain_seed, &[model as u64]), &[])
                    .expect("k bounded by model size")
                    .into_iter()
                    .map(|j| locals[j])
                    .collect()
            })
            .collect();

        let mut selected: Vec<usize> = Vec::with_capacity(quota);
        for round in 0..cfg.max_per_model {
            if selected.len() == quota {
                break;
            }
            let picks: Vec<usize> = ranked.iter().filter_map(|r| r.get(round).copied()).collect();
            if picks.is_empty() {
                break;
            }
            let room = quota - selected.len();
            if picks.len() <= room {
                selected.extend(picks);
            } else {
                let mut sub: Vec<&[f64]> = selected.iter().map(|&l| points[l]).collect();
                sub.extend(picks.iter().map(|&l| points[l]));
                let existing: Vec<usize> = (0..selected.len()).collect();
                let chosen = fps(&sub, room, rng::derive(domain_seed, &[round as u64, 0x524e]), &existing)
                    .expect("room < picks");
                let offset = selected.len();
                selected.extend(chosen.into_iter().map(|j| picks[j - offset]));
            }
        }
        if selected.len() < quota {
            let fill = fps(&points, quota - selected.len(), domain_seed, &selected).expect("quota bounded by domain size");
            if !fill.is_empty() {
                buffer.cap_overflow = true;
            }
            selected.extend(fill);
        }
        for local in selected {
            buffer.push(&pool[members[local]]);
        }
    }
    buffer
}

/// Replay feature space used by farthest-point sampling.
pub trait Featurizer: Sync {
    /// Unit-norm feature vector for `example`.
    fn featurize(&self, example: &Example) -> Result<Vec<f64>>;
}

/// Uses the normalized query features themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct QueryFeatures;

impl Featurizer for QueryFeatures {
    fn featurize(&self, example: &Example) -> Result<Vec<f64>> {
        let norm = example.features.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateQuery);
        }
        Ok(example.features.iter().map(|v| v / norm).collect())
    }
}

/// Builds the coreset buffer over the training splits of `past`.
pub fn build_replay(past: &[Experience], cfg: &ReplayConfig, featurizer: &dyn Featurizer) -> Result<ReplayBuffer> {
    let mut pool = Vec::new();
    for (t, exp) in past.iter().enumerate() {
        for (i, ex) in exp.train.iter().enumerate() {
            pool.push(PoolItem {
                origin: ExampleRef {
                    experience_index: t,
                    example_index: i,
                },
                model: ex.gold,
                domain: ex.domain.clone(),
                features: featurizer.featurize(ex)?,
            });
        }
    }
    let budget = cfg.budget(pool.len())?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for item in &pool {
        *counts.entry(item.domain.clone()).or_default() += 1;
    }
    let allocation = compute_domain_quotas(&counts, budget, cfg.min_per_domain, cfg.max_per_domain);
    let mut buffer = select_coreset(&pool, &allocation.quotas, cfg);
    buffer.budget = budget;
    buffer.floors_trimmed = allocation.floors_trimmed;
    Ok(buffer)
}

/// Uniform sample of the past training splits, without domain structure.
pub fn random_replay(past: &[Experience], budget: usize, seed: u64) -> ReplayBuffer {
    let refs: Vec<(ExampleRef, &Example)> = past
        .iter()
        .enumerate()
        .flat_map(|(t, exp)| {
            exp.train.iter().enumerate().map(move |(i, ex)| {
                (
                    ExampleRef {
                        experience_index: t,
                        example_index: i,
                    },
                    ex,
                )
            })
        })
        .collect();
    let mut picked: Vec<&(ExampleRef, &Example)> = refs.choose_multiple(&mut rng::seeded(seed), budget.min(refs.len())).collect();
    picked.sort_by_key(|(r, _)| *r);
    let mut buffer = ReplayBuffer {
        budget,
        ..ReplayBuffer::default()
    };
    for (origin, ex) in picked {
        buffer.push(&PoolItem {
            origin: *origin,
            model: ex.gold,
            domain: ex.domain.clone(),
            features: Vec::new(),
        });
    }
    buffer
}
