use carve::bench::{generate_benchmark, run_strategy, BenchSpec, Strategy};
use carve::metrics::{forgetting, Metric};
use carve::replay::{QueryFeatures, ReplayConfig};
use carve::router::{mean_cosine_drift, relative_projection_change, RouterState};
use carve::sampling::SamplingConfig;
use carve::training::{run_stream, train_experience, DataMode, Experience, ReplayPolicy, StreamOptions, TrainConfig};
use carve::Registry;

fn spec(experiences: usize, seed: u64) -> BenchSpec {
    BenchSpec {
        num_experiences: experiences,
        domains_per_experience: 3,
        models_per_domain: 4,
        queries_per_model: 16,
        feature_dim: 24,
        legacy_fraction: 0.0,
        seed,
        ..BenchSpec::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        embed_dim: 24,
        lr_proj: 0.01,
        lr_emb: 0.01,
        epochs: 4,
        batch_size: 32,
        lambda_emb: 0.0,
        lambda_proj: 0.0,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn sampling() -> SamplingConfig {
    SamplingConfig {
        k_total: 8,
        k_semantic: 4,
        k_far: 1,
        k_hard: 2,
        mining_every: 10,
        ..SamplingConfig::default()
    }
}

fn stream(exps: &[Experience], options: &StreamOptions) -> carve::training::StreamOutcome {
    run_stream(exps, &train_cfg(), &sampling(), options, &QueryFeatures).unwrap()
}

#[test]
fn single_experience_gives_one_cell() {
    let exps = generate_benchmark(&spec(1, 1)).unwrap().experiences;
    let out = stream(&exps, &StreamOptions::default());
    for m in out.matrices.values() {
        assert_eq!(m.len(), 1);
        assert_eq!(m.rows()[0].len(), 1);
        assert!(forgetting(m).1.is_none());
    }
}

#[test]
fn unanchored_sequential_training_forgets() {
    let exps = generate_benchmark(&spec(3, 2)).unwrap().experiences;
    let out = stream(&exps, &StreamOptions::default());
    let (_, fgt) = forgetting(&out.matrices[&Metric::Model]);
    assert!(fgt.unwrap() > 0.0, "{:?}", out.matrices[&Metric::Model]);
}

#[test]
fn streams_are_deterministic() {
    let exps = generate_benchmark(&spec(2, 3)).unwrap().experiences;
    let options = StreamOptions {
        replay: ReplayPolicy::Coreset(ReplayConfig::default()),
        data: DataMode::Sequential,
    };
    let a = stream(&exps, &options);
    let b = stream(&exps, &options);
    assert_eq!(a.matrices, b.matrices);
    assert_eq!(a.state, b.state);
    assert_eq!(a.replay_buffers, b.replay_buffers);
}

#[test]
fn cumulative_matches_sequential_on_the_first_experience() {
    let exps = generate_benchmark(&spec(2, 4)).unwrap().experiences;
    let seq = stream(&exps, &StreamOptions::default());
    let cum = stream(
        &exps,
        &StreamOptions {
            data: DataMode::Cumulative,
            ..StreamOptions::default()
        },
    );
    for metric in Metric::ALL {
        assert_eq!(seq.matrices[&metric].rows()[0], cum.matrices[&metric].rows()[0]);
    }
}

#[test]
fn joint_on_one_experience_equals_sequential() {
    let exps = generate_benchmark(&spec(1, 5)).unwrap().experiences;
    let replay = ReplayConfig::default();
    let joint = run_strategy(Strategy::Joint, &exps, &train_cfg(), &sampling(), &replay, 7).unwrap();
    let seq = run_strategy(Strategy::Sequential, &exps, &train_cfg(), &sampling(), &replay, 7).unwrap();
    assert_eq!(joint.matrices, seq.matrices);
    assert_eq!(joint.state, seq.state);
}

#[test]
fn noiseless_queries_are_learned_exactly() {
    let s = BenchSpec {
        query_noise: 0.0,
        ..spec(1, 6)
    };
    let exps = generate_benchmark(&s).unwrap().experiences;
    let cfg = TrainConfig {
        epochs: 30,
        ..train_cfg()
    };
    let replay = ReplayConfig::default();
    let out = run_strategy(Strategy::FromScratch, &exps, &cfg, &sampling(), &replay, 1).unwrap();
    assert_eq!(out.matrices[&Metric::Model].get(0, 0), Some(1.0));
}

#[test]
fn stronger_anchors_drift_less() {
    let exps = generate_benchmark(&spec(2, 7)).unwrap().experiences;
    let base = TrainConfig {
        epochs: 8,
        ..train_cfg()
    };
    let s0 = RouterState::new(24, base.embed_dim, 0, base.tau, base.seed).unwrap();
    let first = train_experience(&s0, &Registry::new(), &exps[0], &[], &base, &sampling(), 0).unwrap();
    let mut last = (f64::INFINITY, f64::INFINITY);
    for lambda in [0.0, 1e2, 1e4, 1e6] {
        let cfg = TrainConfig {
            lambda_emb: lambda,
            lambda_proj: lambda,
            ..base.clone()
        };
        let out = train_experience(&first.state, &first.registry, &exps[1], &[], &cfg, &sampling(), 1).unwrap();
        let snap = out.snapshot.unwrap();
        let now = (mean_cosine_drift(&out.state, &snap), relative_projection_change(&out.state, &snap));
        assert!(now.0 < last.0 && now.1 < last.1, "lambda {lambda}: {now:?} vs {last:?}");
        last = now;
    }
}

#[test]
fn coreset_buffers_meet_the_budget() {
    let exps = generate_benchmark(&spec(3, 8)).unwrap().experiences;
    let rc = ReplayConfig {
        replay_ratio: Some(0.2),
        ..ReplayConfig::default()
    };
    let out = stream(
        &exps,
        &StreamOptions {
            replay: ReplayPolicy::Coreset(rc.clone()),
            data: DataMode::Sequential,
        },
    );
    assert!(out.replay_buffers[0].is_empty());
    for (t, buf) in out.replay_buffers.iter().enumerate().skip(1) {
        let pool: usize = exps[..t].iter().map(|e| e.train.len()).sum();
        assert_eq!(buf.len(), rc.budget(pool).unwrap());
        assert!(buf.entries.iter().all(|e| e.origin.experience_index < t));
    }
}

#[test]
fn replay_multiplier_changes_training() {
    let exps = generate_benchmark(&spec(2, 9)).unwrap().experiences;
    let options = StreamOptions {
        replay: ReplayPolicy::Random { ratio: 0.3 },
        data: DataMode::Sequential,
    };
    let a = run_stream(&exps, &train_cfg(), &sampling(), &options, &QueryFeatures).unwrap();
    let cfg = TrainConfig {
        replay_loss_multiplier: 1.0,
        ..train_cfg()
    };
    let b = run_stream(&exps, &cfg, &sampling(), &options, &QueryFeatures).unwrap();
    assert_eq!(a.logs[0], b.logs[0]);
    assert_ne!(a.state, b.state);
}
