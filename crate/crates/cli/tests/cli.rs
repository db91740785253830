use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn carve(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carve")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

const SPEC: &str = "num_experiences = 2\ndomains_per_experience = 3\nmodels_per_domain = 3\nqueries_per_model = 10\nfeature_dim = 64\n";
const EXPERIMENT: &str = "strategy = carve\nseeds = 1\ndataset = data\nembed_dim = 16\nepochs = 3\nlr_proj = 0.01\nlr_emb = 0.01\nk_total = 6\nk_semantic = 3\nk_far = 1\nk_hard = 1\n";

fn trained() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spec.cfg"), SPEC).unwrap();
    fs::write(tmp.path().join("exp.cfg"), EXPERIMENT).unwrap();
    ok(carve(&["gen-bench", "--spec", "spec.cfg", "--out", "data", "--seed", "7"], tmp.path()));
    ok(carve(&["train", "--config", "exp.cfg", "--out", "run"], tmp.path()));
    tmp
}

#[test]
fn gen_bench_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spec.cfg"), SPEC).unwrap();
    ok(carve(&["gen-bench", "--spec", "spec.cfg", "--out", "a", "--seed", "7"], tmp.path()));
    ok(carve(&["gen-bench", "--spec", "spec.cfg", "--out", "b", "--seed", "7"], tmp.path()));
    ok(carve(&["gen-bench", "--spec", "spec.cfg", "--out", "c", "--seed", "8"], tmp.path()));
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert_ne!(tree(&tmp.path().join("a")), tree(&tmp.path().join("c")));
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = carve(&["train", "--config", "missing.cfg"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing.cfg"), "{err}");
}

#[test]
fn unknown_strategy_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.cfg"), EXPERIMENT).unwrap();
    let out = carve(&["train", "--config", "exp.cfg", "--strategy", "magic", "--out", "run"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("magic") && err.contains("random_replay"), "{err}");
}

#[test]
fn train_writes_reports_deterministically() {
    let tmp = trained();
    ok(carve(&["train", "--config", "exp.cfg", "--out", "again"], tmp.path()));
    let run = tmp.path().join("run");
    for f in ["report.json", "report_model.csv", "report_domain.csv", "router.bin", "registry.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(tmp.path().join("again").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(run.join("report_domain.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "trained,Exp 1,Exp 2,FGT");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn route_prints_k_descending_lines() {
    let tmp = trained();
    let text = ok(carve(&["route", "--snapshot", "run/router.bin", "--query", "translate to french", "--k", "3"], tmp.path()));
    let scores: Vec<f64> = text
        .lines()
        .map(|l| {
            let (id, s) = l.split_once('\t').unwrap();
            assert!(id.starts_with("synth/"), "{l}");
            s.parse().unwrap()
        })
        .collect();
    assert_eq!(scores.len(), 3);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn route_accepts_a_feature_file() {
    let tmp = trained();
    let v: Vec<String> = (0..64).map(|i| format!("{}", (i as f64 * 0.37).sin())).collect();
    fs::write(tmp.path().join("q.txt"), v.join(",")).unwrap();
    let text = ok(carve(&["route", "--snapshot", "run/router.bin", "--features", "q.txt", "--k", "2"], tmp.path()));
    assert_eq!(text.lines().count(), 2);

    fs::write(tmp.path().join("short.txt"), "1,2,3").unwrap();
    let out = carve(&["route", "--snapshot", "run/router.bin", "--features", "short.txt"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn eval_reports_requested_metrics() {
    let tmp = trained();
    let text = ok(carve(&["eval", "--snapshot", "run/router.bin", "--dataset", "data", "--metric", "domain", "--metric", "m"], tmp.path()));
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = doc["experiences"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let acc = row["accuracy"].as_object().unwrap();
        assert_eq!(acc.keys().collect::<Vec<_>>(), ["domain", "model"]);
        assert!(acc["model"].as_f64().unwrap() <= acc["domain"].as_f64().unwrap());
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run/report.json")).unwrap()).unwrap();
    let final_row = report["metrics"]["domain"]["matrix"].as_array().unwrap().last().unwrap().clone();
    for (row, cell) in rows.iter().zip(final_row.as_array().unwrap()) {
        assert!((row["accuracy"]["domain"].as_f64().unwrap() - cell.as_f64().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn replay_build_is_seeded() {
    let tmp = trained();
    let args = ["replay-build", "--dataset", "data", "--replay-ratio", "0.2", "--through", "1", "--seed", "3"];
    let a = ok(carve(&args, tmp.path()));
    let b = ok(carve(&args, tmp.path()));
    assert_eq!(a, b);
    let pool = fs::read_to_string(tmp.path().join("data/exp1.jsonl")).unwrap().lines().count();
    assert_eq!(a.lines().count(), pool / 5);
    for line in a.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["experience_index"], 0);
    }
}

#[test]
fn families_lists_every_model() {
    let tmp = trained();
    let text = ok(carve(&["families", "--dataset", "data"], tmp.path()));
    let registry: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run/registry.json")).unwrap()).unwrap();
    let models = registry["records"].as_array().unwrap().len();
    assert_eq!(text.lines().count(), models);
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn exactly_one_subcommand_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!carve(&[], tmp.path()).status.success());
    assert!(!carve(&["route", "--snapshot", "x", "--query", "a", "--features", "b"], tmp.path()).status.success());
}
