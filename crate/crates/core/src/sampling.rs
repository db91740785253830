//! Candidate-set construction, hard-negative mining and semantic batching.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng;
use crate::router::RouterState;
use crate::training::Example;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub k_total: usize,
    pub k_semantic: usize,
    pub k_far: usize,
    pub k_hard: usize,
    /// Optimizer steps between hard-negative refreshes.
    pub mining_every: usize,
    pub hard_pool_size: usize,
    pub semantic_pool_size: usize,
    pub max_pool_size: usize,
    pub semantic_batching: bool,
    pub domains_per_batch: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k_total: 64,
            k_semantic: 38,
            k_far: 10,
            k_hard: 15,
            mining_every: 100,
            hard_pool_size: 50,
            semantic_pool_size: 1024,
            max_pool_size: 2048,
            semantic_batching: true,
            domains_per_batch: 2,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if 1 + self.k_semantic + self.k_far + self.k_hard != self.k_total {
            return Err(Error::InvalidConfig(format!(
                "candidate composition 1 + {} + {} + {} does not sum to k_total {}",
                self.k_semantic, self.k_far, self.k_hard, self.k_total
            )));
        }
        if self.semantic_batching && self.domains_per_batch == 0 {
            return Err(Error::InvalidConfig("domains_per_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed-size label subset for one training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub indices: Vec<usize>,
    pub positive_pos: usize,
}

impl CandidateSet {
    pub fn gold(&self) -> usize {
        self.indices[self.positive_pos]
    }
}

/// Mined confusers keyed by gold model index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HardNegativeCache {
    pub per_gold: BTreeMap<usize, Vec<usize>>,
    pub last_refresh_step: usize,
}

impl HardNegativeCache {
    pub fn confusers(&self, gold: usize) -> &[usize] {
        self.per_gold.get(&gold).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Registry indices grouped by domain, reused across many candidate draws.
#[derive(Debug, Clone)]
pub struct CandidateSampler<'a> {
    registry: &'a Registry,
    by_domain: BTreeMap<&'a str, Vec<usize>>,
    cfg: SamplingConfig,
}

impl<'a> CandidateSampler<'a> {
    pub fn new(registry: &'a Registry, cfg: &SamplingConfig) -> Self {
        let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in registry.records().iter().enumerate() {
            by_domain.entry(r.domain.as_str()).or_default().push(i);
        }
        CandidateSampler {
            registry,
            by_domain,
            cfg: cfg.clone(),
        }
    }

    /// Builds the candidate set for `gold`.
    ///
    /// Fill order is gold, cached hard negatives, same-domain negatives,
    /// other-domain negatives, then uniform fill over whatever remains.
    /// The final order is shuffled.
    pub fn build(&self, gold: usize, gold_domain: &str, cache: &HardNegativeCache, seed: u64) -> Result<CandidateSet> {
        let record = self.registry.record(gold)?;
        if record.domain != gold_domain {
            return Err(Error::InvalidRecord {
                id: record.id.to_string(),
                reason: format!("domain {gold_domain:?} does not match registry domain {:?}", record.domain),
            });
        }
        let n = self.registry.len();
        let k = self.cfg.k_total;
        let mut r = rng::seeded(seed);

        let mut indices: Vec<usize>;
        if n <= k {
            indices = (0..n).collect();
        } else {
            indices = Vec::with_capacity(k);
            let mut chosen = HashSet::with_capacity(k);
            indices.push(gold);
            chosen.insert(gold);

            for &h in cache.confusers(gold).iter() {
                if indices.len() == 1 + self.cfg.k_hard {
                    break;
                }
                if h < n && chosen.insert(h) {
                    indices.push(h);
                }
            }

            let same = self.by_domain.get(gold_domain).map(Vec::as_slice).unwrap_or(&[]);
            let pool: Vec<usize> = same.iter().copied().filter(|i| !chosen.contains(i)).collect();
            take_random(&mut r, &pool, self.cfg.k_semantic, &mut indices, &mut chosen);

            let pool: Vec<usize> = self
                .by_domain
                .iter()
                .filter(|(d, _)| **d != gold_domain)
                .flat_map(|(_, v)| v.iter().copied())
                .filter(|i| !chosen.contains(i))
                .collect();
            take_random(&mut r, &pool, self.cfg.k_far, &mut indices, &mut chosen);

            let pool: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            take_random(&mut r, &pool, k - indices.len(), &mut indices, &mut chosen);
        }
        indices.shuffle(&mut r);
        let positive_pos = indices.iter().position(|&i| i == gold).expect("gold is always included");
        Ok(CandidateSet { indices, positive_pos })
    }
}

fn take_random(r: &mut rng::Rng, pool: &[usize], want: usize, out: &mut Vec<usize>, chosen: &mut HashSet<usize>) {
    for &i in pool.choose_multiple(r, want.min(pool.len())) {
        chosen.insert(i);
        out.push(i);
    }
}

/// One-shot form of [`CandidateSampler::build`].
pub fn build_candidate_set(
    gold: usize,
    gold_domain: &str,
    registry: &Registry,
    cache: &HardNegativeCache,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<CandidateSet> {
    CandidateSampler::new(registry, cfg).build(gold, gold_domain, cache, seed)
}

/// Mines, for every gold model in the sample, the incorrect same-domain
/// models with the highest mean score over that gold's queries.
///
/// The sample keeps the first `semantic_pool_size` examples of each domain
/// and at most `max_pool_size` examples overall, visiting domains in name order.
pub fn mine_hard_negatives(
    state: &RouterState,
    registry: &Registry,
    examples_by_domain: &BTreeMap<String, Vec<(&[f64], usize)>>,
    cfg: &SamplingConfig,
    step: usize,
) -> Result<HardNegativeCache> {
    let mut cache = HardNegativeCache {
        per_gold: BTreeMap::new(),
        last_refresh_step: step,
    };
    let mut budget = cfg.max_pool_size;
    for (domain, examples) in examples_by_domain {
        if budget == 0 {
            break;
        }
        let take = examples.len().min(cfg.semantic_pool_size).min(budget);
        budget -= take;
        let pool: Vec<usize> = registry.indices_in_domain(domain).collect();

        // gold -> (query count, summed scores over pool)
        let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
        for &(features, gold) in &examples[..take] {
            if gold >= registry.len() {
                return Err(Error::IndexOutOfRange {
                    index: gold,
                    len: registry.len(),
                });
            }
            let z = state.embed_query(features)?;
            let scores = state.score(z.view(), &pool)?;
            let entry = sums.entry(gold).or_insert_with(|| (0, vec![0.0; pool.len()]));
            entry.0 += 1;
            for (acc, s) in entry.1.iter_mut().zip(scores) {
                *acc += s;
            }
        }
        for (gold, (count, totals)) in sums {
            let mut ranked: Vec<(usize, f64)> = pool
                .iter()
                .zip(totals)
                .filter(|(&m, _)| m != gold)
                .map(|(&m, t)| (m, t / count as f64))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(cfg.hard_pool_size);
            cache.per_gold.insert(gold, ranked.into_iter().map(|(m, _)| m).collect());
        }
    }
    Ok(cache)
}

/// Groups `examples` by domain for mining, keeping stream order within a domain.
pub fn group_by_domain<'a>(examples: impl IntoIterator<Item = &'a Example>) -> BTreeMap<String, Vec<(&'a [f64], usize)>> {
    let mut out: BTreeMap<String, Vec<(&[f64], usize)>> = BTreeMap::new();
    for ex in examples {
        out.entry(ex.domain.clone()).or_default().push((ex.features.as_slice(), ex.gold));
    }
    out
}

/// Splits `examples` into batches of indices, one epoch's worth.
///
/// With semantic batching each batch draws from at most `domains_per_batch`
/// domains, so batches can come out smaller than `batch_size` when the chosen
/// domains run dry.
pub fn make_batches(examples: &[Example], cfg: &SamplingConfig, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut r = rng::seeded(seed);
    if !cfg.semantic_batching {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut r);
        return Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups.entry(ex.domain.as_str()).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = groups.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut r);
    }
    let mut batches = Vec::new();
    loop {
        let live: Vec<usize> = (0..queues.len()).filter(|&i| !queues[i].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        let picked: Vec<usize> = live
            .choose_multiple(&mut r, cfg.domains_per_batch.min(live.len()))
            .copied()
            .collect();
        let mut batch = Vec::with_capacity(batch_size);
        'fill: loop {
            let mut progressed = false;
            for &q in &picked {
                if batch.len() == batch_size {
                    break 'fill;
                }
                if let Some(i) = queues[q].pop() {
                    batch.push(i);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Distinct domains present in a batch.
pub fn batch_domains<'a>(examples: &'a [Example], batch: &[usize]) -> BTreeSet<&'a str> {
    batch.iter().map(|&i| examples[i].domain.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{ModelId, ModelRecord};
    use ndarray::Array2;

    fn registry(domains: &[&str]) -> Registry {
        let records: Vec<ModelRecord> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| ModelRecord::new(ModelId::new(format!("m/{i}")).unwrap(), *d))
            .collect();
        Registry::new().register_models(&records).unwrap().0
    }

    fn example(domain: &str, gold: usize) -> Example {
        Example::new(vec![1.0, 0.0], gold, domain)
    }

    #[test]
    fn default_composition_sums() {
        SamplingConfig::default().validate().unwrap();
        let bad = SamplingConfig { k_far: 11, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_composition_when_pools_suffice() {
        let mut domains = vec!["a"; 100];
        domains.extend(vec!["b"; 100]);
        let reg = registry(&domains);
        let cfg = SamplingConfig::default();
        let mut cache = HardNegativeCache::default();
        cache.per_gold.insert(0, (1..=50).collect());
        let set = build_candidate_set(0, "a", &reg, &cache, &cfg, 5).unwrap();
        assert_eq!(set.indices.len(), 64);
        assert_eq!(set.gold(), 0);
        let hard = set.indices.iter().filter(|&&i| (1..=15).contains(&i)).count();
        let far = set.indices.iter().filter(|&&i| i >= 100).count();
        assert_eq!(hard, 15);
        assert_eq!(far, 10);
        assert_eq!(64 - 1 - hard - far, 38);
    }

    #[test]
    fn small_registry_is_taken_whole() {
        let reg = registry(&["a", "a", "b", "b", "c"]);
        let set = build_candidate_set(3, "b", &reg, &HardNegativeCache::default(), &SamplingConfig::default(), 1).unwrap();
        let mut sorted = set.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(set.gold(), 3);
    }

    #[test]
    fn hand_traced_fill_order() {
        // gold 0 and b=2 in domain x, a=1 in domain y (hard negative from cache), c=3 in z
        let reg = registry(&["x", "y", "x", "z", "z"]);
        let cfg = SamplingConfig {
            k_total: 4,
            k_hard: 1,
            k_semantic: 1,
            k_far: 1,
            ..Default::default()
        };
        let mut cache = HardNegativeCache::default();
        cache.per_gold.insert(0, vec![1]);
        for seed in 0..20 {
            let set = build_candidate_set(0, "x", &reg, &cache, &cfg, seed).unwrap();
            let got: BTreeSet<usize> = set.indices.iter().copied().collect();
            assert!(got.contains(&0) && got.contains(&1) && got.contains(&2));
            assert_eq!(got.len(), 4);
            assert!(got.contains(&3) || got.contains(&4));
        }
    }

    #[test]
    fn domain_mismatch_is_rejected() {
        let reg = registry(&["x", "y"]);
        assert!(build_candidate_set(0, "y", &reg, &HardNegativeCache::default(), &SamplingConfig::default(), 0).is_err());
    }

    fn mining_state(rows: &[[f64; 2]]) -> RouterState {
        RouterState {
            projection: Array2::eye(2),
            embeddings: Array2::from_shape_vec((rows.len(), 2), rows.concat()).unwrap(),
            tau: 1.0,
            registry_version: 0,
        }
    }

    #[test]
    fn mining_keeps_top_scoring_incorrect_models() {
        // z = (1, 0); cosines g:0.9 a:0.8 b:0.1
        let rows = [0.9f64, 0.8, 0.1].map(|c| [c, (1.0 - c * c).sqrt()]);
        let state = mining_state(&rows);
        let reg = registry(&["d", "d", "d"]);
        let q = [1.0, 0.0];
        let mut by_domain = BTreeMap::new();
        by_domain.insert("d".to_string(), vec![(&q[..], 0usize)]);
        let cfg = SamplingConfig { hard_pool_size: 1, ..Default::default() };
        let cache = mine_hard_negatives(&state, &reg, &by_domain, &cfg, 7).unwrap();
        assert_eq!(cache.confusers(0), &[1]);
        assert_eq!(cache.last_refresh_step, 7);
    }

    #[test]
    fn mining_averages_over_queries() {
        let state = mining_state(&[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]]);
        let reg = registry(&["d", "d", "d"]);
        let (q1, q2) = ([1.0, 0.1], [1.0, 0.3]);
        let mut by_domain = BTreeMap::new();
        by_domain.insert("d".to_string(), vec![(&q1[..], 0usize), (&q2[..], 0usize)]);
        let cfg = SamplingConfig { hard_pool_size: 2, ..Default::default() };
        let cache = mine_hard_negatives(&state, &reg, &by_domain, &cfg, 0).unwrap();
        assert_eq!(cache.confusers(0), &[1, 2]);
    }

    #[test]
    fn single_model_domain_mines_nothing() {
        let state = mining_state(&[[1.0, 0.0], [0.0, 1.0]]);
        let reg = registry(&["d", "e"]);
        let q = [1.0, 0.0];
        let mut by_domain = BTreeMap::new();
        by_domain.insert("d".to_string(), vec![(&q[..], 0usize)]);
        let cache = mine_hard_negatives(&state, &reg, &by_domain, &SamplingConfig::default(), 0).unwrap();
        assert_eq!(cache.confusers(0), &[] as &[usize]);
    }

    #[test]
    fn mining_respects_global_cap() {
        let state = mining_state(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let reg = registry(&["d", "d", "e", "e"]);
        let q = [1.0, 0.0];
        let mut by_domain = BTreeMap::new();
        by_domain.insert("d".to_string(), vec![(&q[..], 0usize)]);
        by_domain.insert("e".to_string(), vec![(&q[..], 2usize)]);
        let cfg = SamplingConfig { max_pool_size: 1, ..Default::default() };
        let cache = mine_hard_negatives(&state, &reg, &by_domain, &cfg, 0).unwrap();
        assert!(cache.per_gold.contains_key(&0));
        assert!(!cache.per_gold.contains_key(&2));
    }

    #[test]
    fn one_domain_batches_cover_everything() {
        let examples: Vec<Example> = (0..23).map(|i| example("d", i)).collect();
        let cfg = SamplingConfig::default();
        let batches = make_batches(&examples, &cfg, 5, 3).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert_eq!(batches, make_batches(&examples, &cfg, 5, 3).unwrap());
    }

    #[test]
    fn batches_limit_domains() {
        let examples: Vec<Example> = ["a", "b", "c", "d"]
            .iter()
            .flat_map(|d| (0..10).map(move |i| example(d, i)))
            .collect();
        let cfg = SamplingConfig::default();
        let batches = make_batches(&examples, &cfg, 10, 9).unwrap();
        for b in &batches {
            assert!(batch_domains(&examples, b).len() <= 2);
        }
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        assert!(make_batches(&examples, &cfg, 0, 9).is_err());
    }
}
