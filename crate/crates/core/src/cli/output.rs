//! Artifact writers. Every file starts with the same provenance block so that
//! reruns of one scenario are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub schema: u32,
    /// sha256 of the scenario after command-line overrides, as canonical JSON
    pub scenario_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(scenario: &impl Serialize, seed: u64) -> Result<Self> {
        let canonical = serde_json::to_vec(scenario)?;
        Ok(Self {
            tool: "nemf",
            version: env!("CARGO_PKG_VERSION"),
            schema: SCHEMA_VERSION,
            scenario_hash: hex::encode(Sha256::digest(&canonical)),
            seed,
        })
    }
}

/// CSV table with a `#`-comment header block.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(meta: &Meta, columns: &[String]) -> Self {
        let mut text = String::new();
        let _ = writeln!(text, "# {} {}", meta.tool, meta.version);
        let _ = writeln!(text, "# schema {}", meta.schema);
        let _ = writeln!(text, "# scenario sha256:{}", meta.scenario_hash);
        let _ = writeln!(text, "# seed {}", meta.seed);
        text.push_str(&columns.join(","));
        text.push('\n');
        Self {
            text,
            width: columns.len(),
        }
    }

    /// Appends a row; `None` cells are left empty.
    pub fn row(&mut self, cells: &[Option<f64>]) {
        debug_assert_eq!(cells.len(), self.width);
        let line: Vec<String> = cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, &self.text)?;
        Ok(path)
    }
}

/// `prefix_r_c` column names for an `rows × cols` block.
pub fn matrix_columns(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| format!("{prefix}_{r}_{c}")))
        .collect()
}

pub fn vector_columns(prefix: &str, len: usize) -> Vec<String> {
    (0..len).map(|r| format!("{prefix}_{r}")).collect()
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    meta: &'a Meta,
    report: &'a T,
}

pub fn json_string<T: Serialize>(meta: &Meta, report: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope { meta, report })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, meta: &Meta, report: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, json_string(meta, report)?)?;
    Ok(path)
}
