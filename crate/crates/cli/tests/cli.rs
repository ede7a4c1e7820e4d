use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nexume::dynfit::Dataset;
use nexume::ehsim::EnergyTrace;

fn nexume(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nexume")).args(args).env_remove("NEXUME_SEED").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("xor.json"), Dataset::xor(32, 1, 0.2).to_json_string()).unwrap();
        std::fs::write(dir.path().join("img.json"), Dataset::patterns(24, 8, 2, 0.05).to_json_string()).unwrap();
        std::fs::write(dir.path().join("rich.csv"), EnergyTrace::constant(20_000.0, 60.0, 0.01).to_csv_string()).unwrap();
        std::fs::write(dir.path().join("dark.csv"), EnergyTrace::constant(0.0, 1.0, 0.01).to_csv_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str) -> Output {
        nexume(&["train", "--data", s(&self.path("img.json")), "--out", s(&self.path(out)), "--seed", "7", "--epochs", "2", "--quiet"])
    }
}

#[test]
fn train_is_byte_reproducible() {
    let f = Fixture::new();
    assert!(f.train("a.json").status.success());
    assert!(f.train("b.json").status.success());
    assert_eq!(std::fs::read(f.path("a.json")).unwrap(), std::fs::read(f.path("b.json")).unwrap());
}

#[test]
fn simulate_writes_the_report_schema() {
    let f = Fixture::new();
    assert!(f.train("m.json").status.success());
    let out = nexume(&[
        "simulate", "--trace", s(&f.path("rich.csv")), "--profile", "synthetic-mid", "--model", s(&f.path("m.json")),
        "--data", s(&f.path("img.json")), "--slo-ms", "300", "--seed", "42", "--out", s(&f.path("r.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("r.json")).unwrap()).unwrap();
    for key in ["prediction", "correct", "latency_ms", "deadline_ms", "counted_correct", "restores", "escalations", "energy_consumed_uJ"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["deadline_ms"], 300.0);
    // Events go to stderr as JSON lines.
    let first = String::from_utf8(out.stderr).unwrap();
    let line = first.lines().next().unwrap();
    assert!(serde_json::from_str::<serde_json::Value>(line).unwrap().get("kind").is_some());

    let again = nexume(&[
        "simulate", "--trace", s(&f.path("rich.csv")), "--profile", "synthetic-mid", "--model", s(&f.path("m.json")),
        "--data", s(&f.path("img.json")), "--slo-ms", "300", "--seed", "42", "--out", s(&f.path("r2.json")), "--quiet",
    ]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(f.path("r.json")).unwrap(), std::fs::read(f.path("r2.json")).unwrap());

    let summary = nexume(&["report", s(&f.path("r.json")), s(&f.path("r2.json"))]);
    assert!(summary.status.success());
    let v: serde_json::Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert_eq!(v["inferences"], 2);
}

#[test]
fn missing_trace_is_a_validation_error() {
    let f = Fixture::new();
    assert!(f.train("m.json").status.success());
    let missing = f.path("nope.csv");
    let out = nexume(&["simulate", "--trace", s(&missing), "--profile", "synthetic-mid", "--model", s(&f.path("m.json")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn starvation_is_a_runtime_error_without_partial_output() {
    let f = Fixture::new();
    assert!(f.train("m.json").status.success());
    let cfg = f.path("c.json");
    std::fs::write(&cfg, r#"{"capacitor": {"v_init": 1.8}, "inference": {"engine": {"max_wait_s": 0.5}}}"#).unwrap();
    let out = nexume(&[
        "simulate", "--config", s(&cfg), "--trace", s(&f.path("dark.csv")), "--profile", "synthetic-mid",
        "--model", s(&f.path("m.json")), "--seed", "1", "--out", s(&f.path("r.json")), "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("r.json").exists());
}

#[test]
fn seed_comes_from_flag_config_or_environment() {
    let f = Fixture::new();
    let (data, model) = (f.path("xor.json"), f.path("m.json"));
    let args = ["train", "--data", s(&data), "--out", s(&model), "--epochs", "1", "--quiet"];
    assert_eq!(nexume(&args).status.code(), Some(1));
    let with_env = Command::new(env!("CARGO_BIN_EXE_nexume")).args(args).env("NEXUME_SEED", "3").output().unwrap();
    assert!(with_env.status.success());
}

#[test]
fn unknown_subcommand_and_bad_config() {
    assert_eq!(nexume(&["frobnicate"]).status.code(), Some(1));
    let f = Fixture::new();
    let cfg = f.path("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "no_such_key": true}"#).unwrap();
    let out = nexume(&["train", "--config", s(&cfg), "--data", s(&f.path("xor.json")), "--out", s(&f.path("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(nexume(&["--help"]).status.success());
}

#[test]
fn config_paths_are_relative_to_the_config() {
    let f = Fixture::new();
    std::fs::write(f.path("c.json"), r#"{"seed": 5, "data": "xor.json", "out": "from_cfg.json", "train": {"epochs": 1}}"#).unwrap();
    let out = nexume(&["train", "--config", s(&f.path("c.json")), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.path("from_cfg.json").exists());
}

#[test]
fn profile_prints_a_sweep() {
    let out = nexume(&["profile", "--profile", "synthetic-low", "--sizes", "1024,2048,4096"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("size_bytes,stride_bytes,latency_ns"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn search_writes_a_csv_report() {
    let f = Fixture::new();
    std::fs::write(
        f.path("s.json"),
        r#"{"seed": 2, "search": {"conv_counts": [2], "filters": [4, 8], "kernels": [[3, 3]]}, "search_steps": 5}"#,
    )
    .unwrap();
    let out = nexume(&[
        "search", "--config", s(&f.path("s.json")), "--data", s(&f.path("img.json")), "--trace", s(&f.path("rich.csv")),
        "--profile", "synthetic-high", "--out", s(&f.path("r.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(f.path("r.csv")).unwrap();
    assert!(text.starts_with("id,descriptor,policy,est_latency_ms,feasible,verdict,val_loss,val_accuracy"));
    assert_eq!(text.lines().count(), 3);
}
