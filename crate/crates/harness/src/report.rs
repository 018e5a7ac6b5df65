use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Scenario};
use crate::HarnessError;

/// A named CSV table with a fixed column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    /// Parses a numeric column; empty cells become `NaN`.
    pub fn f64_column(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else {
            return Vec::new();
        };
        self.rows.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect()
    }
}

/// Everything a scenario produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    /// The first table is written as `<scenario>.csv`, the others as `<scenario>_<name>.csv`.
    pub tables: Vec<Table>,
    pub trace: Vec<Value>,
    pub summary: BTreeMap<String, Value>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn trace<T: Serialize>(&mut self, kind: &str, record: &T) {
        let mut v = serde_json::to_value(record).expect("trace records serialize");
        if let Value::Object(map) = &mut v {
            map.insert("kind".into(), Value::String(kind.into()));
        } else {
            v = serde_json::json!({ "kind": kind, "value": v });
        }
        self.trace.push(v);
    }

    pub fn summarize<T: Serialize>(&mut self, key: &str, value: T) {
        self.summary.insert(key.into(), serde_json::to_value(value).expect("summary values serialize"));
    }
}

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt_f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub scenario: Scenario,
    pub seed: u64,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub summary: BTreeMap<String, Value>,
    /// Output file name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn table_bytes(t: &Table) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

/// Writes the CSV tables, `trace.jsonl` and `manifest.json` into `out_dir`.
pub fn emit_report(
    scenario: Scenario,
    config: &ExperimentConfig,
    report: &Report,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(out_dir)?;
    let mut outputs = BTreeMap::new();
    for (i, t) in report.tables.iter().enumerate() {
        let file = if i == 0 { format!("{scenario}.csv") } else { format!("{scenario}_{}.csv", t.name) };
        let bytes = table_bytes(t)?;
        fs::write(out_dir.join(&file), &bytes)?;
        outputs.insert(file, sha256_hex(&bytes));
    }
    let mut trace = Vec::new();
    for v in &report.trace {
        serde_json::to_writer(&mut trace, v)?;
        trace.write_all(b"\n")?;
    }
    fs::write(out_dir.join("trace.jsonl"), &trace)?;
    outputs.insert("trace.jsonl".into(), sha256_hex(&trace));

    let manifest = Manifest {
        tool: "airfed",
        version: env!("CARGO_PKG_VERSION"),
        scenario,
        seed: config.seed,
        config_sha256: sha256_hex(&serde_json::to_vec(config)?),
        config: config.clone(),
        summary: report.summary.clone(),
        outputs,
    };
    let path = out_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    Ok(path)
}
