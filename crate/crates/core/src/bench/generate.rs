//! Synthetic continual routing benchmark.

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::registry::{ModelId, ModelRecord};
use crate::rng::{self, Rng};
use crate::training::{Example, Experience};

/// Share of each model's queries held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub num_experiences: usize,
    pub domains_per_experience: usize,
    pub models_per_domain: usize,
    pub queries_per_model: usize,
    /// Fraction of each later experience's model slots filled by earlier models.
    pub legacy_fraction: f64,
    pub feature_dim: usize,
    /// Scale of the per-domain offset from the shared direction.
    pub domain_separation: f64,
    pub model_spread: f64,
    pub query_noise: f64,
    /// Noise between a model's prototype and its card features.
    pub card_noise: f64,
    /// Models per family inside a domain.
    pub family_size: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            num_experiences: 4,
            domains_per_experience: 12,
            models_per_domain: 20,
            queries_per_model: 30,
            legacy_fraction: 0.15,
            feature_dim: 64,
            domain_separation: 1.0,
            model_spread: 0.5,
            query_noise: 0.8,
            card_noise: 0.8,
            family_size: 4,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_experiences", self.num_experiences),
            ("domains_per_experience", self.domains_per_experience),
            ("models_per_domain", self.models_per_domain),
            ("queries_per_model", self.queries_per_model),
            ("feature_dim", self.feature_dim),
            ("family_size", self.family_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.legacy_fraction) {
            return Err(Error::InvalidConfig(format!("legacy_fraction must lie in [0, 1), got {}", self.legacy_fraction)));
        }
        let scales = [
            ("domain_separation", self.domain_separation),
            ("model_spread", self.model_spread),
            ("query_noise", self.query_noise),
            ("card_noise", self.card_noise),
        ];
        for (name, v) in scales {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generated experiences plus the prototype of every model, by registry index.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub experiences: Vec<Experience>,
    pub prototypes: Vec<Vec<f64>>,
}

fn gaussian(r: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * Distribution::<f64>::sample(&StandardNormal, r)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn perturb(r: &mut Rng, base: &[f64], scale: f64) -> Vec<f64> {
    let noise = gaussian(r, base.len(), scale);
    unit(base.iter().zip(noise).map(|(b, n)| b + n).collect())
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| f64::from(x as f32)).collect()
}

/// Builds the stream. Every draw comes from a generator derived from
/// `spec.seed`, so equal specs give identical benchmarks.
pub fn generate_benchmark(spec: &BenchSpec) -> Result<Benchmark> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut r = rng::seeded(rng::derive(spec.seed, &[0x4245]));
    let shared = unit(gaussian(&mut r, dim, 1.0));

    let mut prototypes: Vec<Vec<f64>> = Vec::new();
    let mut domains_of: Vec<String> = Vec::new();
    let mut ids: Vec<ModelId> = Vec::new();
    let mut experiences = Vec::with_capacity(spec.num_experiences);

    for t in 0..spec.num_experiences {
        let slots = spec.domains_per_experience * spec.models_per_domain;
        let legacy_count = if t == 0 {
            0
        } else {
            ((spec.legacy_fraction * slots as f64).round() as usize).min(prototypes.len()).min(slots - 1)
        };
        let mut legacy: Vec<usize> = index::sample(&mut r, prototypes.len(), legacy_count).into_vec();
        legacy.sort_unstable();

        let fresh_count = slots - legacy_count;
        let mut new_models = Vec::with_capacity(fresh_count);
        let mut roster: Vec<usize> = Vec::with_capacity(slots);
        for j in 0..spec.domains_per_experience {
            let domain = format!("e{}-domain-{:02}", t + 1, j);
            let centroid = unit(shared.iter().zip(gaussian(&mut r, dim, spec.domain_separation)).map(|(a, b)| a + b).collect());
            let per_domain = fresh_count / spec.domains_per_experience + usize::from(j < fresh_count % spec.domains_per_experience);
            let mut family_center = centroid.clone();
            for i in 0..per_domain {
                let fam = i / spec.family_size;
                if i % spec.family_size == 0 {
                    family_center = perturb(&mut r, &centroid, spec.model_spread);
                }
                let proto = round_f32(perturb(&mut r, &family_center, 0.5 * spec.model_spread));
                let card: Vec<f32> = unit(perturb(&mut r, &proto, spec.card_noise)).iter().map(|&x| x as f32).collect();
                let id = ModelId::new(format!("synth/e{}-d{:02}-m{:02}", t + 1, j, i))?;
                new_models.push(
                    ModelRecord::new(id.clone(), domain.clone())
                        .with_family(format!("e{}-d{:02}-f{}", t + 1, j, fam))
                        .with_card_features(card),
                );
                roster.push(prototypes.len());
                prototypes.push(proto);
                domains_of.push(domain.clone());
                ids.push(id);
            }
        }
        roster.extend(&legacy);

        let mut train = Vec::new();
        let mut eval = Vec::new();
        for &m in &roster {
            let n = spec.queries_per_model;
            let n_eval = if n >= 2 { ((EVAL_FRACTION * n as f64).round() as usize).max(1) } else { 0 };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut r);
            let held: Vec<bool> = {
                let mut h = vec![false; n];
                order[..n_eval].iter().for_each(|&q| h[q] = true);
                h
            };
            for (q, is_eval) in held.into_iter().enumerate() {
                let features = if spec.query_noise == 0.0 {
                    prototypes[m].clone()
                } else {
                    round_f32(perturb(&mut r, &prototypes[m], spec.query_noise))
                };
                let mut ex = Example::new(features, m, domains_of[m].clone());
                ex.instruction = Some(format!("synthetic query {q} for {}", ids[m]));
                if is_eval {
                    eval.push(ex);
                } else {
                    train.push(ex);
                }
            }
        }
        experiences.push(Experience {
            label: format!("Exp {}", t + 1),
            train,
            eval,
            new_models,
        });
    }
    Ok(Benchmark { experiences, prototypes })
}
