use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn ssmdynlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmdynlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SSMDYNLAB_SEED")
        .output()
        .expect("spawn")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Errors are one line: `error: <kind>: <message>`.
fn assert_error_line(o: &Output, code: i32, kind: &str, needle: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {kind}: ")), "{err}");
    assert!(err.contains(needle), "{err}");
}

#[test]
fn zero_draws_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(&["lyapunov", "--set", "draws=0"], dir.path());
    assert_error_line(&o, 2, "config", "no draws requested");
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[divergence]\nepsilon = [1e-3]\n").unwrap();
    let o = ssmdynlab(
        &["divergence", "--config", cfg.to_str().unwrap()],
        &dir.path().join("o"),
    );
    assert_error_line(&o, 2, "config", "`epsilon`");
    let o = ssmdynlab(&["train", "--set", "train.lr=0.1"], &dir.path().join("o"));
    assert_error_line(&o, 2, "config", "`lr`");
    let o = ssmdynlab(&["lyapunov", "--frobnicate"], &dir.path().join("o"));
    assert_error_line(&o, 2, "usage", "frobnicate");
}

#[test]
fn manifest_precedes_results_and_records_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_ssmdynlab"))
        .args(["lyapunov", "--set", "draws=12", "--out"])
        .arg(&out)
        .env("SSMDYNLAB_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 41);
    assert_eq!(m["subcommand"], "lyapunov");
    assert_eq!(m["config"]["draws"], 12);
    assert_eq!(m["schema_version"], 1);
    assert!(!m["library_version"].as_str().unwrap().is_empty());
    let r = json(&out.join("report.json"));
    assert_eq!(r["summary"]["positive_count"], 0);
    assert_eq!(r["estimates"].as_array().unwrap().len(), 12);
    let csv = std::fs::read_to_string(out.join("lyapunov.csv")).unwrap();
    assert!(csv.starts_with("# schema_version: 1\n"));
    assert!(!out.join(".lock").exists());

    // --seed beats the environment
    let o = Command::new(env!("CARGO_BIN_EXE_ssmdynlab"))
        .args(["lyapunov", "--set", "draws=2", "--seed", "3", "--out"])
        .arg(dir.path().join("run2"))
        .env("SSMDYNLAB_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("run2/manifest.json"))["seed"], 3);
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let o = ssmdynlab(&["lyapunov", "--set", "draws=1"], dir.path());
    assert_error_line(&o, 1, "io", "locked");
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn divergence_reference_and_direction() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(&["divergence"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    let mean = |p: &str| {
        r["summary"]
            .as_array()
            .unwrap()
            .iter()
            .find(|row| row["policy"] == p)
            .unwrap()["mean_divergence"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(mean("fp64"), 0.0);
    assert!(
        mean("bf16") > mean("fp16"),
        "bf16 {} fp16 {}",
        mean("bf16"),
        mean("fp16")
    );
    for row in r["probes"].as_array().unwrap() {
        if row["resolved"] == true {
            assert!(row["zeta_max"].as_f64().unwrap() <= 1e-3, "{row}");
        }
        let csv = dir.path().join(row["trace_csv"].as_str().unwrap());
        let text = std::fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("# schema_version: 1\nstep,deviation\n"));
        assert_eq!(text.lines().count(), 2 + 256);
    }
}

#[test]
fn scan_bench_rows_are_exact_and_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(&["scan-bench", "--set", "repeats=1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(row["max_rel_deviation_fp64"].as_f64().unwrap() < 1e-10);
        assert_eq!(row["workers_bit_identical"], true);
    }
    assert_eq!(rows[0]["t"], 1);
    assert_eq!(rows[0]["max_rel_deviation_fp64"], 0.0);
    let timing = json(&dir.path().join("timing.json"));
    assert!(timing["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| t["parallel_seconds"].as_f64().unwrap() >= 0.0));
}

#[test]
fn zero_steps_write_metrics_but_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(&["train", "--set", "total_steps=0"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["total_tokens"], 0);
    assert_eq!(r["checkpoint"], Value::Null);
    assert_eq!(json(&dir.path().join("metrics.json"))["total_tokens"], 0);
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn table3_small_preset_resolves() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(
        &["train", "--preset", "table3-small", "--set", "total_steps=0"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["train"]["learning_rate"], 1.0e-5);
    assert_eq!(m["config"]["train"]["lora_rank"], 8);
    let o = ssmdynlab(&["train", "--preset", "table3-9b"], &dir.path().join("x"));
    assert_error_line(&o, 2, "config", "table3-9b");
}

#[test]
fn lora_verify_needs_an_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let o = ssmdynlab(&["train", "--set", "total_steps=2"], &full);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = full.join("model.ckpt");
    let o = ssmdynlab(&["lora-verify", ckpt.to_str().unwrap()], &dir.path().join("v"));
    assert_error_line(&o, 1, "runtime", "checkpoint has no adapter");
    let o = ssmdynlab(&["lora-verify"], &dir.path().join("v2"));
    assert_error_line(&o, 2, "config", "no checkpoint");
}

#[test]
fn fresh_adapter_has_rank_zero() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    // lr = 0 keeps U at its zero initialisation
    let o = ssmdynlab(
        &[
            "train",
            "--preset",
            "toy-lora",
            "--set",
            "total_steps=1",
            "--set",
            "learning_rate=0.0",
        ],
        &t,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v = dir.path().join("v");
    let o = ssmdynlab(&["lora-verify", t.join("model.ckpt").to_str().unwrap()], &v);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&v.join("report.json"));
    assert_eq!(r["tying"]["rank_observed"], 0);
    assert_eq!(r["passed"], true);
}

#[test]
fn report_combines_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(ssmdynlab(&["lyapunov", "--set", "draws=3"], &a).status.success());
    let out = dir.path().join("combined");
    let o = ssmdynlab(&["report", a.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("report.json"));
    assert_eq!(r["runs"][0]["subcommand"], "lyapunov");
    assert_eq!(r["runs"][0]["report"]["summary"]["draws"], 3);
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.contains(",lyapunov,summary.positive_count,0\n"), "{csv}");
    let o = ssmdynlab(&["report"], &dir.path().join("empty"));
    assert_error_line(&o, 2, "config", "no runs");
}

#[test]
fn require_faster_needs_compare() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssmdynlab(&["train", "--require-faster"], dir.path());
    assert_error_line(&o, 2, "usage", "--compare");
}
