//! `carve` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use carve::bench::{
    featurize, generate_benchmark, load_dataset, load_experiences, parse_bench_spec, run_experiment_on, save_dataset, BenchSpec,
    ExperimentConfig, LoadOptions, Strategy,
};
use carve::metrics::Metric;
use carve::replay::{build_replay, QueryFeatures, ReplayConfig};
use carve::training::{evaluate, stream_families, Example, Experience};
use carve::{Registry, RouterState};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carve", version, about = "Continual embedding-based model routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    GenBench {
        /// Benchmark spec file (`key = value` lines).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a training experiment and write its report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        replay_ratio: Option<f64>,
        /// Replaces the configured seeds; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved router on a dataset.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        registry: RegistryArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Metrics to report; repeatable. All metrics by default.
        #[arg(long)]
        metric: Vec<Metric>,
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route one query with a saved router.
    Route {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        registry: RegistryArg,
        /// Query text, featurized with the hashing featurizer.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        query: Option<String>,
        /// Comma- or whitespace-separated feature vector file.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        featurize_seed: u64,
    },
    /// Build a coreset replay buffer and write its audit file.
    ReplayBuild {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        replay_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of leading experiences forming the pool. All by default.
        #[arg(long)]
        through: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the model families of a dataset.
    Families {
        #[command(flatten)]
        source: Source,
    },
}

#[derive(Args)]
struct RegistryArg {
    /// Registry file; defaults to `registry.json` next to the snapshot.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct LoadArgs {
    #[arg(long, default_value_t = 256)]
    text_feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    featurize_seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl LoadArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            feature_dim: self.text_feature_dim,
            featurize_seed: self.featurize_seed,
            split_seed: self.split_seed,
        }
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Experiment config; its dataset (or generated benchmark) is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<(ExperimentConfig, Vec<Experience>)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        let experiences = load_experiences(&cfg)?;
        Ok((cfg, experiences))
    }
}

fn registry_path(snapshot: &Path, arg: &RegistryArg) -> PathBuf {
    arg.registry
        .clone()
        .unwrap_or_else(|| snapshot.parent().unwrap_or(Path::new(".")).join("registry.json"))
}

fn registry_of(experiences: &[Experience]) -> Result<Registry> {
    let mut reg = Registry::new();
    for e in experiences {
        reg = reg.register_models(&e.new_models)?.0;
    }
    Ok(reg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("{}", parent.display()))?;
            }
            fs::write(path, text).with_context(|| format!("{}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gen_bench(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut bench = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
            parse_bench_spec(&text, path)?
        }
        None => BenchSpec::default(),
    };
    if let Some(s) = seed {
        bench.seed = s;
    }
    let generated = generate_benchmark(&bench)?;
    save_dataset(out, &generated.experiences)?;
    let queries: usize = generated.experiences.iter().map(|e| e.train.len() + e.eval.len()).sum();
    let models: usize = generated.experiences.iter().map(|e| e.new_models.len()).sum();
    println!("wrote {} experiences, {models} models, {queries} queries to {}", generated.experiences.len(), out.display());
    Ok(())
}

fn train(config: &Path, strategy: Option<&str>, replay_ratio: Option<f64>, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(r) = replay_ratio {
        cfg.replay.replay_ratio = Some(r);
        cfg.replay.replay_budget = None;
    }
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `out` in {}", config.display()))?;
    let experiences = load_experiences(&cfg)?;
    let output = run_experiment_on(&cfg, &experiences)?;
    output.write_to(&out)?;
    for metric in [Metric::Model, Metric::Domain] {
        let entry = &output.report.metrics[&metric];
        println!(
            "{:<6} acc {}  fgt {}",
            metric.name(),
            entry.mean.overall_mean.map_or("-".into(), |a| format!("{a:6.2}")),
            entry.mean.mean_forgetting.map_or("-".into(), |f| format!("{f:6.2}"))
        );
    }
    println!("wrote report for {} ({} seeds) to {}", cfg.strategy, cfg.seeds.len(), out.display());
    Ok(())
}

fn eval(snapshot: &Path, registry: &RegistryArg, dataset: &Path, metrics: &[Metric], load: &LoadArgs, out: Option<&Path>) -> Result<()> {
    let state = RouterState::load(snapshot)?;
    let reg = Registry::load(&registry_path(snapshot, registry))?;
    if state.num_models() != reg.len() {
        bail!("{}: router has {} model rows but the registry lists {}", snapshot.display(), state.num_models(), reg.len());
    }
    let ds = load_dataset(dataset, &load.options())?;
    let families = stream_families(&ds.experiences);
    let metrics: Vec<Metric> = if metrics.is_empty() { Metric::ALL.to_vec() } else { metrics.to_vec() };

    let mut rows = Vec::new();
    let mut per_metric: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
    for exp in &ds.experiences {
        if exp.eval.is_empty() {
            continue;
        }
        let remapped: Vec<Example> = exp
            .eval
            .iter()
            .map(|ex| {
                let id = ds.registry.id(ex.gold)?;
                let gold = reg.lookup(id).ok_or_else(|| anyhow!("model {id} is not in the router's registry"))?;
                Ok(Example { gold, ..ex.clone() })
            })
            .collect::<Result<_>>()?;
        let scores = evaluate(&state, &reg, &families, &remapped)?;
        let mut cells = serde_json::Map::new();
        for m in &metrics {
            let pct = 100.0 * scores[m];
            per_metric.entry(*m).or_default().push(pct);
            cells.insert(m.name().into(), pct.into());
        }
        rows.push(serde_json::json!({ "label": exp.label, "examples": remapped.len(), "accuracy": cells }));
    }
    if rows.is_empty() {
        bail!("{}: dataset has no evaluation examples", dataset.display());
    }
    let means: serde_json::Map<String, serde_json::Value> = per_metric
        .iter()
        .map(|(m, v)| (m.name().to_string(), (v.iter().sum::<f64>() / v.len() as f64).into()))
        .collect();
    let doc = serde_json::json!({ "experiences": rows, "mean": means });
    emit(out, &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("{}: bad number {t:?}", path.display())))
        .collect()
}

fn route(snapshot: &Path, registry: &RegistryArg, query: Option<&str>, features: Option<&Path>, k: usize, seed: u64) -> Result<()> {
    let state = RouterState::load(snapshot)?;
    let reg = Registry::load(&registry_path(snapshot, registry))?;
    if state.num_models() != reg.len() {
        bail!("{}: router has {} model rows but the registry lists {}", snapshot.display(), state.num_models(), reg.len());
    }
    let h = match (query, features) {
        (Some(q), _) => featurize(q, state.feature_dim(), seed)?,
        (None, Some(path)) => read_vector(path)?,
        (None, None) => bail!("pass --query or --features"),
    };
    let all: Vec<usize> = (0..reg.len()).collect();
    let mut out = String::new();
    for (m, score) in state.top_k(&h, &all, k)? {
        out.push_str(&format!("{}\t{score:.6}\n", reg.id(m)?));
    }
    emit(None, &out)
}

fn replay_build(source: &Source, ratio: Option<f64>, seed: Option<u64>, through: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (cfg, experiences) = source.load()?;
    let n = through.unwrap_or(experiences.len());
    if n == 0 || n > experiences.len() {
        bail!("--through must be between 1 and {}", experiences.len());
    }
    let past = &experiences[..n];
    let rc = ReplayConfig {
        replay_ratio: ratio.or(cfg.replay.replay_ratio),
        replay_budget: if ratio.is_some() { None } else { cfg.replay.replay_budget },
        seed: seed.unwrap_or(cfg.replay.seed),
        ..cfg.replay.clone()
    };
    let buffer = build_replay(past, &rc, &QueryFeatures)?;
    let mut audit = Vec::new();
    buffer.write_audit(&registry_of(past)?, &mut audit)?;
    emit(out, std::str::from_utf8(&audit)?)?;
    eprintln!(
        "selected {} of budget {} across {} domains{}{}",
        buffer.len(),
        buffer.budget,
        buffer.per_domain_counts.len(),
        if buffer.floors_trimmed { ", floors trimmed" } else { "" },
        if buffer.cap_overflow { ", per-model cap exceeded by fill" } else { "" }
    );
    Ok(())
}

fn families(source: &Source) -> Result<()> {
    let (_, experiences) = source.load()?;
    let map = stream_families(&experiences);
    let mut out = String::new();
    for (family, members) in map.groups() {
        for id in members {
            out.push_str(&format!("{family}\t{id}\n"));
        }
    }
    emit(None, &out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBench { spec, out, seed } => gen_bench(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            strategy,
            replay_ratio,
            seed,
            out,
        } => train(&config, strategy.as_deref(), replay_ratio, &seed, out.as_deref()),
        Command::Eval {
            snapshot,
            registry,
            dataset,
            metric,
            load,
            out,
        } => eval(&snapshot, &registry, &dataset, &metric, &load, out.as_deref()),
        Command::Route {
            snapshot,
            registry,
            query,
            features,
            k,
            featurize_seed,
        } => route(&snapshot, &registry, query.as_deref(), features.as_deref(), k, featurize_seed),
        Command::ReplayBuild {
            source,
            replay_ratio,
            seed,
            through,
            out,
        } => replay_build(&source, replay_ratio, seed, through, out.as_deref()),
        Command::Families { source } => families(&source),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("carve: {msg}");
            ExitCode::FAILURE
        }
    }
}
