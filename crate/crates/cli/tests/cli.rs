use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vflbus_core::planner::{brute_force_search, SearchSpace};
use vflbus_core::profiler::DelayModelConstants;
use vflbus_core::KvFile;

const CONFIG: &str = "\
data=synthetic
n=1000
d=20
n_informative=4
d_active=10
epochs=3
batch_size=64
mode=PureVFL
w_a=1
w_p=1
seed=3
calibration_batches=16,32,64,128
calibration_reps=2
";

fn vflbus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vflbus"))
        .args(args)
        .output()
        .expect("spawn vflbus")
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.kv");
    std::fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn losses(path: &Path) -> Vec<u64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["mean_train_loss"].as_f64().unwrap().to_bits()
        })
        .collect()
}

#[test]
fn train_writes_one_line_per_epoch_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "");
    let runs: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            ok(&vflbus(&["train", "--config", s(&cfg), "--out", s(&out_dir)]));
            out_dir
        })
        .collect();
    let first = losses(&runs[0].join("metrics.jsonl"));
    assert_eq!(first.len(), 3);
    assert_eq!(first, losses(&runs[1].join("metrics.jsonl")));

    let line = std::fs::read_to_string(runs[0].join("metrics.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["epoch", "wall_seconds", "test_metric", "total_wait_seconds", "bytes_published", "active", "passive"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(runs[0].join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "PureVFL");
    assert_eq!(summary["epochs"], 3);
    assert!(runs[0].join("models.json").exists());
}

#[test]
fn profile_then_plan_matches_exhaustive_search() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "");
    let prof_dir = dir.path().join("prof");
    ok(&vflbus(&["profile", "--config", s(&cfg), "--out", s(&prof_dir)]));
    let prof_path = prof_dir.join("profile.kv");
    let text = std::fs::read_to_string(&prof_path).unwrap();
    let constants = DelayModelConstants::from_kv(&KvFile::parse(&text).unwrap()).unwrap();
    assert_eq!(constants.to_kv().render(), text, "profile re-parses losslessly");
    for key in [
        "lambda_a", "gamma_a", "lambda_p", "gamma_p", "phi_a", "beta_a", "phi_p", "beta_p", "lambda_a_top",
        "gamma_a_top", "phi_a_top", "beta_a_top",
    ] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key}="))), "missing {key}");
    }
    assert!(prof_dir.join("calibration.json").exists());

    let plan_dir = dir.path().join("plan");
    ok(&vflbus(&[
        "plan", "--profile", s(&prof_path), "--wa", "1..6", "--wp", "1..6", "--batches", "16,64,256", "--out",
        s(&plan_dir),
    ]));
    let plan = KvFile::read(plan_dir.join("plan.kv")).unwrap();
    let b: usize = plan.require("batch_size").unwrap();
    let b_max: f64 = plan.require("b_max").unwrap();
    assert!(b as f64 <= b_max);
    let expect = brute_force_search(&constants, &SearchSpace::new(1..=6, 1..=6, vec![16, 64, 256])).unwrap();
    assert_eq!(plan.require::<usize>("w_a").unwrap(), expect.w_a);
    assert_eq!(plan.require::<usize>("w_p").unwrap(), expect.w_p);
    assert_eq!(b, expect.batch_size);
    assert_eq!(plan.require::<f64>("cost").unwrap().to_bits(), expect.cost.to_bits());
}

#[test]
fn compare_reports_each_mode() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "epochs=2\n");
    let out_dir = dir.path().join("cmp");
    ok(&vflbus(&[
        "compare", "--config", s(&cfg), "--modes", "PureVFL,VFL_PS,PubSubVFL", "--wa", "2", "--wp", "2", "--out",
        s(&out_dir),
    ]));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("compare.json")).unwrap()).unwrap();
    let modes: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["PureVFL", "VFL_PS", "PubSubVFL"]);
    for row in table["rows"].as_array().unwrap() {
        assert_eq!(row["status"], "ok");
    }
    assert!(out_dir.join("PubSubVFL").join("metrics.jsonl").exists());
}

#[test]
fn invalid_configuration_exits_with_2() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "");
    let out = vflbus(&["train", "--config", s(&cfg), "--wa", "3", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = vflbus(&["train", "--config", s(&dir.path().join("missing.kv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_batches_exit_with_4() {
    let dir = TempDir::new().unwrap();
    let prof = dir.path().join("profile.kv");
    DelayModelConstants::reference().to_kv().write(&prof).unwrap();
    let out = vflbus(&["plan", "--profile", s(&prof), "--batches", "4096,8192", "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
