use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mada::cli::{mean_and_std_error, RunConfig};
use mada::data::{load_csv, load_labels, CsvSchema};
use mada::Domain;
use serde_json::Value;
use tempfile::TempDir;

fn mada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mada"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const BLOBS: &str = r#"
seeds = [0]
[data.synthetic]
swap_prone = false
rotation_deg = 0.0
samples_per_class = 60
[train]
algorithm = "source_only"
total_iterations = 500
eval_interval = 100
"#;

#[test]
fn gen_writes_default_swap_prone_task() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("data");
    let o = mada(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["source_rows"], 2000);
    assert_eq!(summary["target_rows"], 2000);

    let schema = |d| CsvSchema { dim: Some(2), class_count: Some(4), domain: Some(d) };
    let source = load_csv(out.join("source.csv"), &schema(Domain::Source)).unwrap();
    let target = load_csv(out.join("target.csv"), &schema(Domain::Target)).unwrap();
    assert_eq!(source.len(), 2000);
    assert!(source.labels.iter().all(Option::is_some));
    assert!(target.labels.iter().all(Option::is_none));
    assert_eq!(load_labels(out.join("target_truth.csv")).unwrap().len(), 2000);

    let again = dir.path().join("again");
    assert!(mada(&["gen", "--config", s(&cfg), "--out", s(&again)]).status.success());
    for f in ["source.csv", "target.csv", "target_truth.csv"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_or_invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.toml");
    for cmd in ["gen", "train"] {
        assert_eq!(mada(&[cmd, "--config", s(&missing)]).status.code(), Some(2), "{cmd}");
    }
    let bad = write_config(dir.path(), "[train]\ntotal_iterations = 0\n");
    assert_eq!(mada(&["train", "--config", s(&bad)]).status.code(), Some(2));
    let unknown = write_config(dir.path(), "[train]\nlearning_rate = 3\n");
    assert_eq!(mada(&["gen", "--config", s(&unknown)]).status.code(), Some(2));
}

#[test]
fn train_writes_expected_records_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
seeds = [1, 2, 3]
[data.synthetic]
samples_per_class = 20
[train]
algorithm = "source_only"
total_iterations = 25
eval_interval = 10
"#,
    );
    let out = dir.path().join("run");
    let o = mada(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut finals = Vec::new();
    for seed in 1..=3 {
        let recs = metrics(&out.join(format!("seed-{seed}/metrics.jsonl")));
        // ceil(25 / 10) + 1
        assert_eq!(recs.len(), 4);
        let iters: Vec<u64> = recs.iter().map(|r| r["iteration"].as_u64().unwrap()).collect();
        assert_eq!(iters, [0, 10, 20, 25]);
        for r in &recs {
            assert_eq!(r["domain_loss"].as_f64(), Some(0.0));
            for key in ["p", "eta", "lambda", "label_loss", "target_accuracy", "source_accuracy", "a_distance"] {
                assert!(r.get(key).is_some(), "missing {key}");
            }
        }
        assert!(out.join(format!("seed-{seed}/checkpoint.txt")).exists());
        finals.push(recs[3]["target_accuracy"].as_f64().unwrap());
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let (mean, se) = mean_and_std_error(&finals).unwrap();
    assert_eq!(summary["mean_target_accuracy"].as_f64(), Some(mean));
    assert_eq!(summary["std_error_target_accuracy"].as_f64(), Some(se));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[data.synthetic]\nsamples_per_class = 10\n[train]\ntotal_iterations = 3\n");
    let out = dir.path().join("run");
    assert!(mada(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7,9"]).status.success());
    assert!(out.join("seed-7/metrics.jsonl").exists());
    assert!(out.join("seed-9/metrics.jsonl").exists());
    assert!(!out.join("seed-0").exists());
}

#[test]
fn summary_statistics_match_definition() {
    let (mean, se) = mean_and_std_error(&[0.5, 0.7, 0.9]).unwrap();
    assert!((mean - 0.7).abs() < 1e-15);
    // s = 0.2, s / sqrt(3)
    assert!((se - 0.2 / 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn eval_reports_accuracy_adist_and_export() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(mada(&["gen", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let o = mada(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("seed-0/checkpoint.txt");

    let o = mada(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("source.csv"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["source_accuracy"].as_f64().unwrap() >= 0.99, "{report}");

    // the same points tagged once as source and once as target
    let text = std::fs::read_to_string(data.join("source.csv")).unwrap();
    let mirrored: String = text
        .lines()
        .skip(1)
        .map(|l| format!("{},0\n", l.rsplit_once(',').unwrap().0))
        .collect();
    let both = dir.path().join("both.csv");
    std::fs::write(&both, format!("{text}{mirrored}")).unwrap();
    let export = dir.path().join("emb.csv");
    let o = mada(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&both), "--adist", "--export", s(&export),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["a_distance"].as_f64().unwrap() <= 0.2, "{report}");

    let exported = std::fs::read_to_string(&export).unwrap();
    let header: Vec<&str> = exported.lines().next().unwrap().split(',').collect();
    // default bottleneck width plus label and domain
    assert_eq!(header.len(), 32 + 2);
    assert_eq!(exported.lines().count(), 1 + 2 * 240);
}

#[test]
fn eval_rejects_mismatched_features() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[data.synthetic]\nsamples_per_class = 5\n[train]\ntotal_iterations = 2\n");
    let run = dir.path().join("run");
    assert!(mada(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let csv = dir.path().join("wide.csv");
    std::fs::write(&csv, "f0,f1,f2,label,domain\n1,2,3,0,1\n").unwrap();
    let o = mada(&["eval", "--checkpoint", s(&run.join("seed-0/checkpoint.txt")), "--data", s(&csv)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes_by_default() {
    let o = mada(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(out.trim_end().lines().last().unwrap().starts_with("PASS"));
}

#[test]
fn gradcheck_with_one_class_compares_mada_and_dann() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[gradcheck]\nclass_count = 1\n");
    let o = mada(&["gradcheck", "--config", s(&cfg)]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("K=1 mada vs dann"));
}

#[test]
fn config_paths_resolve_relative_to_the_file() {
    let dir = TempDir::new().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    let p = dir.path().join("sub/run.toml");
    std::fs::write(&p, "[data]\nsource_csv = \"s.csv\"\ntarget_csv = \"t.csv\"\n").unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.data.source_csv.unwrap(), dir.path().join("sub/s.csv"));
}
