//! File writers: CSV at full double precision, JSON results, and the run
//! manifest. Everything is written atomically (temp file + rename) so a
//! crashed run never leaves a partial artifact behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

/// 17 significant digits: enough to reproduce any f64 bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        Self {
            buf: header.join(",") + "\n",
            columns: header.len(),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.columns, "csv row width mismatch");
        let mut first = true;
        for v in values {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&fmt_f64(*v));
            first = false;
        }
        self.buf.push('\n');
    }

    /// Mixed row with a leading integer id column.
    pub fn row_with_id(&mut self, id: u64, values: &[f64]) {
        assert_eq!(values.len() + 1, self.columns, "csv row width mismatch");
        self.buf.push_str(&id.to_string());
        for v in values {
            self.buf.push(',');
            self.buf.push_str(&fmt_f64(*v));
        }
        self.buf.push('\n');
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Run manifest: config echo, library version, invariant drift summary, the
/// artifact list, and (outside deterministic mode) the wall time.
pub struct Manifest {
    config_echo: Value,
    drifts: Vec<(String, f64)>,
    extras: Vec<(String, Value)>,
    outputs: Vec<PathBuf>,
    deterministic: bool,
}

impl Manifest {
    pub fn new(config_echo: Value, deterministic: bool) -> Self {
        Self {
            config_echo,
            drifts: Vec::new(),
            extras: Vec::new(),
            outputs: Vec::new(),
            deterministic,
        }
    }

    pub fn set_drifts(&mut self, drifts: Vec<(String, f64)>) {
        self.drifts = drifts;
    }

    pub fn add_extra(&mut self, key: &str, value: Value) {
        self.extras.push((key.to_string(), value));
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn save(&self, path: &Path, wall_time_s: f64) -> Result<()> {
        let mut doc = json!({
            "library_version": env!("CARGO_PKG_VERSION"),
            "config": self.config_echo,
            "invariant_drift": self.drifts.iter().map(|(k, v)| json!({"name": k, "max_rel_drift": v})).collect::<Vec<_>>(),
            "outputs": self.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
        });
        for (k, v) in &self.extras {
            doc[k] = v.clone();
        }
        if !self.deterministic {
            doc["wall_time_s"] = json!(wall_time_s);
        }
        write_json(path, &doc)
    }
}
