//! Synthetic benchmark, dataset files, query featurizer, the retrieval
//! baseline and the experiment runner.

mod config;
mod dataset;
mod experiment;
mod featurize;
mod generate;

pub use config::{parse_bench_spec, ExperimentConfig};
pub use dataset::{features_path, load_dataset, save_dataset, Dataset, DatasetRecord, LoadOptions, Manifest, ManifestEntry, MANIFEST_FILE};
pub use experiment::{
    load_experiences, retrieval_baseline, run_experiment, run_experiment_file, run_experiment_on, run_strategy, ExperimentOutput,
    RunResult, Strategy,
};
pub use featurize::{featurize, MIN_FEATURE_DIM};
pub use generate::{generate_benchmark, BenchSpec, Benchmark, EVAL_FRACTION};
