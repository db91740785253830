//! Runs several strategies on the generated benchmark and prints mean
//! domain accuracy and forgetting for each.
//!
//! ```text
//! cargo run --release --example strategy_sweep -- [config.cfg] [strategy ...]
//! ```

use std::path::Path;
use std::time::Instant;

use carve::bench::{generate_benchmark, run_experiment_on, ExperimentConfig, Strategy};
use carve::metrics::Metric;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cfg, names) = match args.first() {
        Some(p) if p.ends_with(".cfg") => (ExperimentConfig::load(Path::new(p))?, &args[1..]),
        _ => (ExperimentConfig::default(), &args[..]),
    };
    let strategies: Vec<Strategy> = if names.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?
    };
    let experiences = generate_benchmark(&cfg.bench)?.experiences;
    println!("{:<22} {:>8} {:>8} {:>8} {:>8} {:>7}", "strategy", "M-Acc", "D-Acc", "D-Fgt", "M-Fgt", "secs");
    for strategy in strategies {
        let started = Instant::now();
        let run = ExperimentConfig {
            strategy,
            ..cfg.clone()
        };
        let out = run_experiment_on(&run, &experiences)?;
        let m = &out.report.metrics[&Metric::Model].mean;
        let d = &out.report.metrics[&Metric::Domain].mean;
        println!(
            "{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>7.1}",
            strategy.name(),
            m.overall_mean.unwrap_or(f64::NAN),
            d.overall_mean.unwrap_or(f64::NAN),
            d.mean_forgetting.unwrap_or(f64::NAN),
            m.mean_forgetting.unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
