//! Flat `key = value` experiment configuration.
//!
//! Keys are the field names of [`BenchSpec`], [`TrainConfig`],
//! [`SamplingConfig`], [`ReplayConfig`] and [`LoadOptions`], optionally
//! prefixed with their section (`bench.`, `train.`, `sampling.`, `replay.`,
//! `load.`). A bare key applies to every section that has that field, so a
//! bare `seed` sets all of them. Lines starting with `#` are comments.
//!
//! ```text
//! strategy = carve
//! seeds = 1, 2, 3
//! embed_dim = 64
//! bench.seed = 7
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::dataset::LoadOptions;
use super::experiment::Strategy;
use super::generate::BenchSpec;
use crate::error::{Error, Result};
use crate::replay::ReplayConfig;
use crate::sampling::SamplingConfig;
use crate::training::{AnchorVariant, SoftTargets, TrainConfig, TwoPhase};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    /// Dataset manifest; the benchmark is generated from `bench` when absent.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bench: BenchSpec,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub replay: ReplayConfig,
    pub load: LoadOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Carve,
            seeds: vec![0],
            dataset: None,
            out: None,
            bench: BenchSpec::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            replay: ReplayConfig::default(),
            load: LoadOptions::default(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn optional<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

type Applied = std::result::Result<bool, String>;

fn set_bench(s: &mut BenchSpec, key: &str, v: &str) -> Applied {
    match key {
        "num_experiences" => s.num_experiences = num(v)?,
        "domains_per_experience" => s.domains_per_experience = num(v)?,
        "models_per_domain" => s.models_per_domain = num(v)?,
        "queries_per_model" => s.queries_per_model = num(v)?,
        "legacy_fraction" => s.legacy_fraction = num(v)?,
        "feature_dim" => s.feature_dim = num(v)?,
        "domain_separation" => s.domain_separation = num(v)?,
        "model_spread" => s.model_spread = num(v)?,
        "query_noise" => s.query_noise = num(v)?,
        "card_noise" => s.card_noise = num(v)?,
        "family_size" => s.family_size = num(v)?,
        "seed" => s.seed = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_train(c: &mut TrainConfig, key: &str, v: &str) -> Applied {
    match key {
        "embed_dim" => c.embed_dim = num(v)?,
        "tau" => c.tau = num(v)?,
        "lr_proj" => c.lr_proj = num(v)?,
        "lr_emb" => c.lr_emb = num(v)?,
        "lambda_emb" => c.lambda_emb = num(v)?,
        "lambda_proj" => c.lambda_proj = num(v)?,
        "anchor_variant" => {
            c.anchor_variant = match v.to_ascii_lowercase().as_str() {
                "cosine" => AnchorVariant::Cosine,
                "l2" => AnchorVariant::L2,
                _ => return Err(format!("anchor_variant must be cosine or l2, got {v:?}")),
            }
        }
        "epochs" => c.epochs = num(v)?,
        "batch_size" => c.batch_size = num(v)?,
        "replay_loss_multiplier" => c.replay_loss_multiplier = num(v)?,
        "soft_targets" => c.soft_targets = flag(v)?.then(SoftTargets::default),
        "soft_epsilon" => c.soft_targets.get_or_insert_with(SoftTargets::default).epsilon = num(v)?,
        "soft_k_neighbors" => c.soft_targets.get_or_insert_with(SoftTargets::default).k_neighbors = num(v)?,
        "two_phase" => c.two_phase = flag(v)?.then(TwoPhase::default),
        "phase1_fraction" => c.two_phase.get_or_insert_with(TwoPhase::default).phase1_fraction = num(v)?,
        "phase1_lr_proj" => c.two_phase.get_or_insert_with(TwoPhase::default).phase1_lr_proj = num(v)?,
        "phase1_lr_emb" => c.two_phase.get_or_insert_with(TwoPhase::default).phase1_lr_emb = num(v)?,
        "anchors_phase1_only" => c.two_phase.get_or_insert_with(TwoPhase::default).anchors_phase1_only = flag(v)?,
        "beta1" => c.optimizer.beta1 = num(v)?,
        "beta2" => c.optimizer.beta2 = num(v)?,
        "adam_eps" => c.optimizer.eps = num(v)?,
        "weight_decay" => c.optimizer.weight_decay = num(v)?,
        "seed" => c.seed = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_sampling(c: &mut SamplingConfig, key: &str, v: &str) -> Applied {
    match key {
        "k_total" => c.k_total = num(v)?,
        "k_semantic" => c.k_semantic = num(v)?,
        "k_far" => c.k_far = num(v)?,
        "k_hard" => c.k_hard = num(v)?,
        "mining_every" => c.mining_every = num(v)?,
        "hard_pool_size" => c.hard_pool_size = num(v)?,
        "semantic_pool_size" => c.semantic_pool_size = num(v)?,
        "max_pool_size" => c.max_pool_size = num(v)?,
        "semantic_batching" => c.semantic_batching = flag(v)?,
        "domains_per_batch" => c.domains_per_batch = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_replay(c: &mut ReplayConfig, key: &str, v: &str) -> Applied {
    match key {
        "replay_ratio" => c.replay_ratio = optional(v)?,
        "replay_budget" => c.replay_budget = optional(v)?,
        "min_per_domain" => c.min_per_domain = num(v)?,
        "max_per_domain" => c.max_per_domain = optional(v)?,
        "max_per_model" => c.max_per_model = num(v)?,
        "seed" => c.seed = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_load(c: &mut LoadOptions, key: &str, v: &str) -> Applied {
    match key {
        "text_feature_dim" => c.feature_dim = num(v)?,
        "featurize_seed" => c.featurize_seed = num(v)?,
        "split_seed" => c.split_seed = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (section, field) = match key.split_once('.') {
            Some((s, f)) => (Some(s), f),
            None => (None, key),
        };
        let mut applied = false;
        match section {
            None => {
                match field {
                    "strategy" => {
                        self.strategy = value.parse().map_err(|e: Error| e.to_string())?;
                        return Ok(());
                    }
                    "seeds" => {
                        self.seeds = value
                            .split(',')
                            .map(|s| num::<u64>(s.trim()))
                            .collect::<std::result::Result<_, _>>()?;
                        if self.seeds.is_empty() {
                            return Err("seeds must list at least one seed".into());
                        }
                        return Ok(());
                    }
                    "dataset" => {
                        self.dataset = Some(PathBuf::from(value));
                        return Ok(());
                    }
                    "out" => {
                        self.out = Some(PathBuf::from(value));
                        return Ok(());
                    }
                    _ => {}
                }
                applied |= set_bench(&mut self.bench, field, value)?;
                applied |= set_train(&mut self.train, field, value)?;
                applied |= set_sampling(&mut self.sampling, field, value)?;
                applied |= set_replay(&mut self.replay, field, value)?;
                applied |= set_load(&mut self.load, field, value)?;
            }
            Some("bench") => applied = set_bench(&mut self.bench, field, value)?,
            Some("train") => applied = set_train(&mut self.train, field, value)?,
            Some("sampling") => applied = set_sampling(&mut self.sampling, field, value)?,
            Some("replay") => applied = set_replay(&mut self.replay, field, value)?,
            Some("load") => applied = set_load(&mut self.load, field, value)?,
            Some(other) => return Err(format!("unknown section {other:?}")),
        }
        if applied {
            Ok(())
        } else {
            Err(format!("unknown key {key:?}"))
        }
    }

    /// Parses configuration text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let schema = |message: String| Error::Schema {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| schema(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(schema)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse(&text, path)?;
        if let (Some(d), Some(dir)) = (&cfg.dataset, path.parent()) {
            if d.is_relative() {
                cfg.dataset = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }
}

/// Parses `BenchSpec` settings written in the same format, where only
/// [`BenchSpec`] keys are accepted.
pub fn parse_bench_spec(text: &str, path: &Path) -> Result<BenchSpec> {
    let mut spec = BenchSpec::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| schema(format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        let field = key.strip_prefix("bench.").unwrap_or(key);
        if !set_bench(&mut spec, field, value.trim()).map_err(schema)? {
            return Err(schema(format!("unknown key {key:?}")));
        }
    }
    Ok(spec)
}
