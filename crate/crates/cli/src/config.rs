//! TOML run configuration: top-level `seed` and `workers`, then one table
//! per subcommand. Command-line overrides are applied on top of the file.

use crate::error::{CliError, CliResult};
use serde::de::DeserializeOwned;
use std::path::Path;
use toml::{Table, Value};

pub const SEED_ENV: &str = "SSMDYNLAB_SEED";
pub const SECTIONS: [&str; 6] = ["lyapunov", "divergence", "scan-bench", "train", "lora-verify", "report"];
const TOP_LEVEL: [&str; 2] = ["seed", "workers"];

#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    table: Table,
}

impl ConfigDoc {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        let doc = Self { table };
        doc.check_keys()?;
        Ok(doc)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(e.message()))?;
        let doc = Self { table };
        doc.check_keys()?;
        Ok(doc)
    }

    fn check_keys(&self) -> CliResult<()> {
        for (k, v) in &self.table {
            if SECTIONS.contains(&k.as_str()) {
                if !v.is_table() {
                    return Err(CliError::config(format!("`{k}` must be a table")));
                }
            } else if !TOP_LEVEL.contains(&k.as_str()) {
                return Err(CliError::config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Apply `key=value`. A dotted key addresses a table path; a bare key
    /// is top-level for `seed`/`workers` and belongs to `section` otherwise.
    /// The value is read as a TOML literal, falling back to a plain string.
    pub fn apply_override(&mut self, raw: &str, section: &str) -> CliResult<()> {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{raw}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::config(format!("override `{raw}` has an empty key")));
        }
        let mut path: Vec<&str> = key.split('.').collect();
        if path.len() == 1 && !TOP_LEVEL.contains(&key) {
            path.insert(0, section);
        }
        let value = parse_literal(value.trim());
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut table = &mut self.table;
        for p in parents {
            let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| CliError::config(format!("`{p}` in override `{key}` is not a table")))?;
        }
        table.insert(last.to_string(), value);
        self.check_keys()
    }

    /// Deserialize one section; unknown or mistyped keys are reported with
    /// the section name.
    pub fn section<T: DeserializeOwned>(&self, name: &str) -> CliResult<T> {
        let table = self
            .table
            .get(name)
            .cloned()
            .unwrap_or_else(|| Value::Table(Table::new()));
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("[{name}] {}", e.message())))
    }

    pub fn top_u64(&self, key: &str) -> CliResult<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(CliError::config(format!(
                "`{key}` must be a non-negative integer, got {v}"
            ))),
        }
    }
}

fn parse_literal(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// `--seed`, then the config, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, doc: &ConfigDoc, env: Option<String>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = doc.top_u64("seed")? {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV} = `{v}` is not a non-negative integer"))),
        None => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, Default, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        draws: usize,
        name: String,
        dims: Vec<usize>,
    }

    #[test]
    fn overrides_win_and_parse_literals() {
        let mut doc = ConfigDoc::parse("seed = 3\n[lyapunov]\ndraws = 5\n").unwrap();
        doc.apply_override("draws=7", "lyapunov").unwrap();
        doc.apply_override("lyapunov.name=abc", "train").unwrap();
        doc.apply_override("dims=[1, 2]", "lyapunov").unwrap();
        doc.apply_override("seed=11", "lyapunov").unwrap();
        let s: Demo = doc.section("lyapunov").unwrap();
        assert_eq!(
            s,
            Demo {
                draws: 7,
                name: "abc".into(),
                dims: vec![1, 2]
            }
        );
        assert_eq!(resolve_seed(None, &doc, Some("99".into())).unwrap(), 11);
    }

    #[test]
    fn unknown_keys_are_named() {
        let doc = ConfigDoc::parse("[lyapunov]\ndrawz = 5\n").unwrap();
        let err = doc.section::<Demo>("lyapunov").unwrap_err().to_string();
        assert!(err.contains("drawz") && err.contains("[lyapunov]"), "{err}");
        let err = ConfigDoc::parse("sede = 1").unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn seed_precedence() {
        let empty = ConfigDoc::default();
        assert_eq!(
            resolve_seed(Some(1), &ConfigDoc::parse("seed = 2").unwrap(), Some("3".into())).unwrap(),
            1
        );
        assert_eq!(resolve_seed(None, &empty, Some("3".into())).unwrap(), 3);
        assert_eq!(resolve_seed(None, &empty, None).unwrap(), 0);
        assert!(resolve_seed(None, &empty, Some("x".into())).is_err());
    }
}
