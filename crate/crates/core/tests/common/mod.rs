#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use carve::registry::{ModelId, ModelRecord, Registry};
use carve::rng;
use carve::router::RouterState;
use carve::sampling::{CandidateSet, HardNegativeCache, SamplingConfig};
use carve::training::{loss_and_grads, AnchorVariant, BatchItem, Example, Targets, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn registry(domains: &[&str]) -> Registry {
    let records: Vec<ModelRecord> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| ModelRecord::new(ModelId::new(format!("org/model-{i}")).unwrap(), *d))
        .collect();
    Registry::new().register_models(&records).unwrap().0
}

pub struct GradCheck {
    pub projection_rel: f64,
    pub embedding_rel: f64,
    /// Largest finite-difference gradient found on a row the analytic
    /// gradient reports as untouched.
    pub untouched_max: f64,
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic and central-difference gradients of the total loss on a
/// random instance with feature dim 8, embedding dim 4 and 5 candidates.
pub fn gradient_check(seed: u64, variant: AnchorVariant, soft: bool, replay: bool) -> GradCheck {
    let (dim_in, dim_out, k) = (8, 4, 5);
    let mut r = rng::seeded(seed);
    let models = r.gen_range(k..=10);
    let state0 = RouterState::new(dim_in, dim_out, models, 0.08 + r.gen::<f64>() * 0.5, seed).unwrap();
    let mut snap = state0.snapshot();
    snap.anchored_count = r.gen_range(1..=models);
    let mut state = state0.clone();
    state.projection.mapv_inplace(|v| v + r.gen_range(-0.1..0.1));
    state.embeddings.mapv_inplace(|v| v + r.gen_range(-0.1..0.1));

    let cfg = TrainConfig {
        lambda_emb: r.gen_range(0.1..5.0),
        lambda_proj: r.gen_range(0.1..5.0),
        anchor_variant: variant,
        replay_loss_multiplier: if replay { 5.0 } else { 1.0 },
        ..TrainConfig::default()
    };
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let mut ex = Example::new((0..dim_in).map(|_| r.gen_range(-1.0..1.0)).collect(), 0, "d");
            ex.from_replay = replay && r.gen_bool(0.5);
            ex
        })
        .collect();
    let items: Vec<BatchItem> = examples
        .iter()
        .map(|ex| {
            let mut all: Vec<usize> = (0..models).collect();
            all.shuffle(&mut r);
            let indices: Vec<usize> = all[..k].to_vec();
            let positive_pos = r.gen_range(0..k);
            let targets = if soft {
                let mut others: Vec<usize> = (0..k).filter(|&p| p != positive_pos).collect();
                others.shuffle(&mut r);
                Targets::Soft {
                    epsilon: r.gen_range(0.01..0.3),
                    neighbors: others[..2].to_vec(),
                }
            } else {
                Targets::Hard
            };
            BatchItem {
                example: ex,
                candidates: CandidateSet { indices, positive_pos },
                targets,
            }
        })
        .collect();

    let (_, grads) = loss_and_grads(&state, Some(&snap), &items, &cfg).unwrap();
    let total = |s: &RouterState| loss_and_grads(s, Some(&snap), &items, &cfg).unwrap().0.total;
    let h = 1e-6;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..dim_in {
        for j in 0..dim_out {
            let mut p = state.clone();
            p.projection[[i, j]] += h;
            let mut m = state.clone();
            m.projection[[i, j]] -= h;
            numeric.push((total(&p) - total(&m)) / (2.0 * h));
            analytic.push(grads.projection[[i, j]]);
        }
    }
    let projection_rel = rel(&analytic, &numeric);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut untouched_max: f64 = 0.0;
    for row in 0..models {
        for j in 0..dim_out {
            let mut p = state.clone();
            p.embeddings[[row, j]] += h;
            let mut m = state.clone();
            m.embeddings[[row, j]] -= h;
            let fd = (total(&p) - total(&m)) / (2.0 * h);
            match grads.embeddings.get(&row) {
                Some(g) => {
                    analytic.push(g[j]);
                    numeric.push(fd);
                }
                None => untouched_max = untouched_max.max(fd.abs()),
            }
        }
    }
    GradCheck {
        projection_rel,
        embedding_rel: rel(&analytic, &numeric),
        untouched_max,
    }
}

/// Greedy farthest-point selection computed directly from the definition.
pub fn fps_oracle(points: &[Vec<f64>], k: usize, seed: u64, existing: &[usize]) -> Vec<usize> {
    let dist = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut selected: Vec<usize> = existing.to_vec();
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    if existing.is_empty() {
        let first = rng::seeded(seed).gen_range(0..points.len());
        selected.push(first);
        out.push(first);
    }
    while out.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected
                .iter()
                .map(|&s| dist(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.unwrap();
        selected.push(i);
        out.push(i);
    }
    out
}

pub fn random_unit_points(r: &mut rng::Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !pts.is_empty() && r.gen_bool(0.1) {
            let dup = pts[r.gen_range(0..pts.len())].clone();
            pts.push(dup);
            continue;
        }
        let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        pts.push(v.into_iter().map(|x| x / norm).collect());
    }
    pts
}

/// Checks one candidate set; returns a description of the first violation.
pub fn candidate_contract(
    set: &CandidateSet,
    gold: usize,
    registry: &Registry,
    cache: &HardNegativeCache,
    cfg: &SamplingConfig,
) -> Result<(), String> {
    let n = registry.len();
    let unique: BTreeSet<usize> = set.indices.iter().copied().collect();
    if unique.len() != set.indices.len() {
        return Err(format!("duplicates in {:?}", set.indices));
    }
    if set.indices.iter().filter(|&&i| i == gold).count() != 1 || set.gold() != gold {
        return Err("gold not present exactly once at positive_pos".into());
    }
    if unique.iter().any(|&i| i >= n) {
        return Err("index out of range".into());
    }
    if n <= cfg.k_total {
        if unique.len() != n {
            return Err(format!("expected the full registry of {n}, got {}", unique.len()));
        }
        return Ok(());
    }
    if set.indices.len() != cfg.k_total {
        return Err(format!("size {} != k_total {}", set.indices.len(), cfg.k_total));
    }
    let gold_domain = registry.domain(gold).unwrap();
    let mut hard: Vec<usize> = Vec::new();
    for &h in cache.confusers(gold) {
        if hard.len() == cfg.k_hard {
            break;
        }
        if h != gold && h < n && !hard.contains(&h) {
            hard.push(h);
        }
    }
    let same: Vec<usize> = registry.indices_in_domain(gold_domain).filter(|i| *i != gold && !hard.contains(i)).collect();
    let other: Vec<usize> = (0..n).filter(|i| registry.domain(*i).unwrap() != gold_domain && !hard.contains(i)).collect();
    let pools_suffice = hard.len() == cfg.k_hard && same.len() >= cfg.k_semantic && other.len() >= cfg.k_far;
    if pools_suffice {
        if !hard.iter().all(|h| unique.contains(h)) {
            return Err("missing hard negatives".into());
        }
        let s = same.iter().filter(|i| unique.contains(i)).count();
        let f = other.iter().filter(|i| unique.contains(i)).count();
        if s != cfg.k_semantic || f != cfg.k_far {
            return Err(format!("composition {s} semantic / {f} far, expected {} / {}", cfg.k_semantic, cfg.k_far));
        }
    }
    Ok(())
}

/// A random registry, sampling config and hard-negative cache.
pub fn random_candidate_case(r: &mut rng::Rng) -> (Registry, SamplingConfig, HardNegativeCache) {
    let n = r.gen_range(1..=160);
    let domains = r.gen_range(1..=8);
    let names: Vec<String> = (0..domains).map(|d| format!("dom{d}")).collect();
    let labels: Vec<&str> = (0..n).map(|_| names[r.gen_range(0..domains)].as_str()).collect();
    let reg = registry(&labels);
    let k_hard = r.gen_range(0..=12);
    let k_semantic = r.gen_range(0..=30);
    let k_far = r.gen_range(0..=12);
    let cfg = SamplingConfig {
        k_total: 1 + k_hard + k_semantic + k_far,
        k_hard,
        k_semantic,
        k_far,
        ..SamplingConfig::default()
    };
    let mut per_gold = BTreeMap::new();
    for g in 0..n {
        if r.gen_bool(0.7) {
            let dom = reg.domain(g).unwrap();
            let mut same: Vec<usize> = reg.indices_in_domain(dom).filter(|&i| i != g).collect();
            same.shuffle(r);
            same.truncate(r.gen_range(0..=20));
            per_gold.insert(g, same);
        }
    }
    (
        reg,
        cfg,
        HardNegativeCache {
            per_gold,
            last_refresh_step: 0,
        },
    )
}
