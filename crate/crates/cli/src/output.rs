//! Output directory handling. Every JSON file carries `schema_version` at
//! the top level and every CSV starts with a `# schema_version:` line.

use crate::error::{CliError, CliResult};
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;
const LOCK_NAME: &str = ".lock";

/// An output directory held exclusively for one run. The lock file is
/// created atomically and removed when the value drops.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let lock = path.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another run (remove {} if no run is active)",
                path.display(),
                lock.display()
            ))),
            Err(e) => Err(CliError::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Pretty JSON with `schema_version` first; `value` must serialize to
    /// an object.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let body = serde_json::to_value(value).map_err(CliError::runtime)?;
        let Value::Object(fields) = body else {
            return Err(CliError::runtime(format!("{name}: report is not an object")));
        };
        let mut out = Map::new();
        out.insert("schema_version".into(), json!(SCHEMA_VERSION));
        for (k, v) in fields {
            if k != "schema_version" {
                out.insert(k, v);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(out)).map_err(CliError::runtime)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// `body` is the CSV proper, header line included.
    pub fn write_csv(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        self.write_text(name, &format!("# schema_version: {SCHEMA_VERSION}\n{body}"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.file(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_NAME));
    }
}

/// Written before any result.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub subcommand: &'a str,
    pub library_version: &'a str,
    pub seed: u64,
    pub workers: usize,
    pub config_path: Option<String>,
    pub overrides: &'a [String],
    pub config: &'a C,
}

/// Non-finite floats become JSON `null` through serde_json; keep that
/// explicit for values that may legitimately be missing.
pub fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}
