use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simtune")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const CONFIG: &str = r#"{
  "paths": { "workdir": "work" },
  "ensemble": {
    "seed": 4, "n_r": 4, "nx": 6, "ny": 6,
    "horizon_days": 60.0, "report_interval_days": 20.0, "injection_rate": 20.0
  },
  "campaign": {
    "ensemble_seed": 50, "n_r": 4,
    "plan": { "kind": "lhs", "n": 20, "seed": 2 },
    "timeout_factor": 2.0
  },
  "esmda": { "alphas": [2.0, 2.0], "seed": 1, "svd_tol": 1e-8 },
  "workflow": { "query_size": 100, "seed": 3, "workers": 2 },
  "train": { "seed": 0 }
}"#;

fn project(dir: &Path) -> String {
    let p = dir.join("project.json");
    fs::write(&p, CONFIG).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_reference_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = simtune(&["simulate", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run.log")).unwrap();
    for key in ["MBE_OIL=", "MBE_WATER=", "MBE_GAS=", "END_STATUS=NORMAL"] {
        assert!(log.contains(key), "{key}");
    }
    assert!(dir.path().join("result.json").exists());
    assert!(fs::read_to_string(dir.path().join("curves.csv")).unwrap().starts_with("day,FIELD_OPT"));
}

#[test]
fn simulate_failures_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&simtune(&["simulate", "--timeout", "1e-9", "--out", out])), 2);
    assert_eq!(code(&simtune(&["simulate", "--set", "lin_iter_max=many", "--out", out])), 1);
    assert_eq!(code(&simtune(&["simulate", "--set", "norm_press=70", "--set", "maxchange_press=20", "--out", out])), 1);
    assert_eq!(code(&simtune(&["frobnicate"])), 1);
    assert_eq!(code(&simtune(&["dataset", "--config", "/nonexistent/project.json"])), 1);
    assert_eq!(code(&simtune(&["--help"])), 0);
}

#[test]
fn simulate_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = simtune(&["simulate", "--set", "solver_kind=direct", "--set", "dt_max=5", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    // a 100-day horizon with dt_max = 5 needs at least 20 steps
    assert!(r["counters"]["timesteps"].as_u64().unwrap() >= 20);
}

#[test]
fn dataset_train_esmda_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path());
    let work = dir.path().join("work");

    let o = simtune(&["dataset", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(work.join("dataset.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() <= 80);
    let groups: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(groups.len(), 4);

    let again = dir.path().join("again");
    let o = simtune(&["dataset", "--config", &cfg, "--workers", "1", "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(again.join("dataset.csv")).unwrap(), csv.as_bytes());

    let o = simtune(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(work.join("oracle.json").exists());
    let report = fs::read_to_string(work.join("cv_report.csv")).unwrap();
    // 4 splits plus the mean row for the single candidate
    assert_eq!(report.lines().count(), 1 + 5);

    let o = simtune(&["esmda", "--config", &cfg, "--tuned", "--baseline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for arm in ["tuned", "baseline"] {
        let ledger = fs::read_to_string(work.join(arm).join("ledger.csv")).unwrap();
        assert_eq!(ledger.lines().count(), 1 + 3 * 4);
        assert!(work.join(arm).join("esmda/manifest.json").exists());
    }
    assert_eq!(fs::read_to_string(work.join("report/runs.csv")).unwrap().lines().count(), 1 + 2 * 12);

    let b = work.join("baseline/ledger.json");
    let out = dir.path().join("same");
    let o = simtune(&["report", "--tuned", b.to_str().unwrap(), "--baseline", b.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "speedup").unwrap();
    for l in lines {
        assert_eq!(l.split(',').nth(col).unwrap(), "1");
    }
}

#[test]
fn esmda_needs_an_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path());
    assert_eq!(code(&simtune(&["esmda", "--config", &cfg])), 1);
}

#[test]
fn train_with_one_group_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path());
    let o = simtune(&["dataset", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    let work = dir.path().join("work");
    let csv = fs::read_to_string(work.join("dataset.csv")).unwrap();
    let mut lines = csv.lines();
    let mut one = String::from(lines.next().unwrap());
    one.push('\n');
    for l in lines.filter(|l| l.starts_with("model_0,")) {
        one.push_str(l);
        one.push('\n');
    }
    fs::write(work.join("one.csv"), one).unwrap();
    fs::copy(work.join("dataset.schema.json"), work.join("one.schema.json")).unwrap();
    let one_path = work.join("one.csv");
    assert_eq!(code(&simtune(&["train", "--config", &cfg, "--dataset", one_path.to_str().unwrap()])), 3);
}
