use crate::error::{CliError, CliResult};
use crate::RunContext;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Run directories, each holding `manifest.json` and `report.json`.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunEntry {
    run: String,
    subcommand: Value,
    seed: Value,
    workers: Value,
    report: Value,
}

#[derive(Debug, Serialize)]
struct Combined {
    runs: Vec<RunEntry>,
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Scalar leaves of `v` as `(dotted.key, value)`; array items are keyed by
/// index.
fn scalar_leaves(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                scalar_leaves(&key, child, out);
            }
        }
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                scalar_leaves(&format!("{prefix}.{i}"), child, out);
            }
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn run(ctx: &RunContext, runs: Vec<PathBuf>) -> CliResult<()> {
    let mut cfg: ReportConfig = ctx.doc.section("report")?;
    if !runs.is_empty() {
        cfg.runs = runs;
    }
    if cfg.runs.is_empty() {
        return Err(CliError::config("no runs given"));
    }
    let mut entries = Vec::new();
    for run in &cfg.runs {
        let manifest = read_json(&run.join("manifest.json"))?;
        let mut report = read_json(&run.join("report.json"))?;
        if let Value::Object(map) = &mut report {
            map.shift_remove("schema_version");
        }
        entries.push(RunEntry {
            run: run.display().to_string(),
            subcommand: manifest["subcommand"].clone(),
            seed: manifest["seed"].clone(),
            workers: manifest["workers"].clone(),
            report,
        });
    }
    let dir = ctx.start(&cfg)?;

    let mut csv = String::from("run,subcommand,key,value\n");
    for e in &entries {
        let mut leaves = Vec::new();
        // the summary alone when there is one; per-draw records stay in the report
        match e.report.get("summary") {
            Some(s) => scalar_leaves("summary", s, &mut leaves),
            None => scalar_leaves("", &e.report, &mut leaves),
        }
        let sub = e.subcommand.as_str().unwrap_or("");
        for (k, v) in leaves {
            let _ = writeln!(csv, "{},{},{},{}", csv_field(&e.run), sub, csv_field(&k), csv_field(&v));
        }
    }
    dir.write_csv("summary.csv", &csv)?;
    dir.write_json("report.json", &Combined { runs: entries })?;
    Ok(())
}
