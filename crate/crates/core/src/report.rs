//! CSV tables and JSON run summaries.
//!
//! Every table has a fixed header and typed columns. Floats are written with
//! 17 significant digits (`{:.16e}`), integers in decimal, and records end
//! with a single LF. [`check_dir`] re-validates a run directory against these
//! schemas without recomputing anything.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUMMARY_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Int,
    Float,
    /// A float or an empty field.
    OptionalFloat,
    /// An integer or an empty field.
    OptionalInt,
    /// A float written with exactly two decimals.
    Fixed2,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableSchema {
    pub file: &'static str,
    pub columns: &'static [(&'static str, ColumnKind)],
}

use ColumnKind::{Fixed2, Float, Int, OptionalFloat, OptionalInt, Text};

pub const VERIFY: TableSchema = TableSchema {
    file: "verify.csv",
    columns: &[("check", Text), ("measured", Float), ("relation", Text), ("tolerance", Float), ("status", Text)],
};

pub const TRAIN_LOG: TableSchema = TableSchema {
    file: "train_log.csv",
    columns: &[
        ("seed", Int),
        ("method", Text),
        ("step", Int),
        ("task_loss", Float),
        ("balance_loss", Float),
        ("grad_norm", Float),
    ],
};

pub const EVAL: TableSchema = TableSchema {
    file: "eval.csv",
    columns: &[("seed", Int), ("method", Text), ("step", Int), ("eval_loss", Float)],
};

pub const LOADS: TableSchema = TableSchema {
    file: "loads.csv",
    columns: &[("seed", Int), ("method", Text), ("step", Int), ("expert", Int), ("load", Float)],
};

pub const TRAIN_SUMMARY: TableSchema = TableSchema {
    file: "train_summary.csv",
    columns: &[
        ("seed", Int),
        ("method", Text),
        ("reference_loss", Float),
        ("final_loss", Float),
        ("relative_final_loss", Float),
    ],
};

pub const RETENTION: TableSchema = TableSchema {
    file: "retention.csv",
    columns: &[
        ("seed", Int),
        ("method", Text),
        ("phase", Int),
        ("task", Int),
        ("loss", Float),
        ("reference_loss", Float),
        ("retention", Float),
    ],
};

pub const DEGRADATION: TableSchema = TableSchema {
    file: "degradation.csv",
    columns: &[("seed", Int), ("method", Text), ("task", Int), ("degradation", Float)],
};

pub const SWEEP: TableSchema = TableSchema {
    file: "sweep.csv",
    columns: &[
        ("n_experts", Int),
        ("top_k", Int),
        ("seed", Int),
        ("status", Text),
        ("final_loss", OptionalFloat),
        ("trainable_params", OptionalInt),
        ("min_load", OptionalFloat),
        ("reason", Text),
    ],
};

pub const MOMENTS: TableSchema = TableSchema {
    file: "moments.csv",
    columns: &[
        ("expert", Int),
        ("empirical_mean", Float),
        ("empirical_variance", Float),
        ("theoretical_mean", Float),
        ("theoretical_variance", Float),
    ],
};

pub const ACCOUNTING: TableSchema = TableSchema {
    file: "accounting.csv",
    columns: &[
        ("preset", Text),
        ("method", Text),
        ("params", Float),
        ("proportion", Fixed2),
        ("flops", OptionalFloat),
    ],
};

pub const ALL_TABLES: [TableSchema; 10] =
    [VERIFY, TRAIN_LOG, EVAL, LOADS, TRAIN_SUMMARY, RETENTION, DEGRADATION, SWEEP, MOMENTS, ACCOUNTING];

/// 17 significant digits, round-trip exact.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn optional_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn fixed2(v: f64) -> String {
    format!("{v:.2}")
}

/// Rows of stringified cells for one table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: TableSchema) -> Self {
        Table { schema, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.schema.columns.len(), "{}", self.schema.file);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let encode = |e: csv::Error| Error::Schema(format!("{}: {e}", self.schema.file));
        w.write_record(self.schema.columns.iter().map(|c| c.0)).map_err(encode)?;
        for row in &self.rows {
            w.write_record(row).map_err(encode)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Schema(format!("{}: {e}", self.schema.file)))?;
        String::from_utf8(bytes).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.schema.file);
        let text = self.to_csv()?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn cell_ok(kind: ColumnKind, cell: &str) -> bool {
    match kind {
        ColumnKind::Int => cell.parse::<i64>().is_ok(),
        ColumnKind::Float => cell.parse::<f64>().is_ok(),
        ColumnKind::OptionalFloat => cell.is_empty() || cell.parse::<f64>().is_ok(),
        ColumnKind::OptionalInt => cell.is_empty() || cell.parse::<i64>().is_ok(),
        ColumnKind::Fixed2 => {
            cell.parse::<f64>().is_ok() && cell.split_once('.').is_some_and(|(_, frac)| frac.len() == 2)
        }
        ColumnKind::Text => true,
    }
}

/// Validates CSV text against a schema; returns the number of data rows.
pub fn validate_csv(schema: &TableSchema, text: &str) -> Result<usize> {
    let fail = |msg: String| Error::Schema(format!("{}: {msg}", schema.file));
    if text.contains('\r') {
        return Err(fail("records must end with LF only".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.0).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(fail(format!("header {:?} differs from {:?}", header.iter().collect::<Vec<_>>(), expected)));
    }
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        if record.len() != schema.columns.len() {
            return Err(fail(format!("row {} has {} fields", line + 1, record.len())));
        }
        for ((name, kind), cell) in schema.columns.iter().zip(record.iter()) {
            if !cell_ok(*kind, cell) {
                return Err(fail(format!("row {} column '{name}' has invalid value '{cell}'", line + 1)));
            }
        }
        rows += 1;
    }
    Ok(rows)
}

/// Versioned, timestamped description of one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub summary_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Seconds since the Unix epoch when the run finished.
    pub created_unix: u64,
    pub files: Vec<String>,
    /// Command-specific headline numbers.
    pub results: serde_json::Value,
}

impl RunSummary {
    pub fn new(command: &str, seed: u64, files: Vec<String>, results: serde_json::Value) -> Self {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        RunSummary {
            summary_version: SUMMARY_VERSION,
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            created_unix,
            files,
            results,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Outcome of validating a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DirCheck {
    /// `(file, data rows)` for every table found.
    pub tables: Vec<(String, usize)>,
    pub summary: RunSummary,
}

/// Validates the summary and every table it lists.
pub fn check_dir(dir: &Path) -> Result<DirCheck> {
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{SUMMARY_FILE}: {e}")))?;
    if summary.summary_version != SUMMARY_VERSION {
        return Err(Error::Schema(format!("{SUMMARY_FILE}: unsupported version {}", summary.summary_version)));
    }
    let mut tables = Vec::new();
    for file in &summary.files {
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::Schema(format!("{file} is listed in the summary but missing")));
        }
        if file == CONFIG_COPY {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            crate::config::ExperimentConfig::from_toml(&text)?;
            continue;
        }
        let schema = ALL_TABLES
            .iter()
            .find(|s| s.file == file)
            .ok_or_else(|| Error::Schema(format!("{file} has no documented schema")))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        tables.push((file.clone(), validate_csv(schema, &text)?));
    }
    Ok(DirCheck { tables, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_17_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.125] {
            let s = float(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            let digits: String = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect();
            assert_eq!(digits.len(), 17);
        }
        assert_eq!(float(0.125), "1.2500000000000000e-1");
        assert_eq!(fixed2(2.2439), "2.24");
    }

    #[test]
    fn tables_validate_and_use_lf() {
        let mut t = Table::new(MOMENTS);
        t.push(vec!["0".into(), float(0.125), float(0.04), float(0.125), float(0.046875)]);
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("expert,empirical_mean,"));
        assert!(!text.contains('\r'));
        assert_eq!(validate_csv(&MOMENTS, &text).unwrap(), 1);
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let good = "expert,empirical_mean,empirical_variance,theoretical_mean,theoretical_variance\n";
        assert!(validate_csv(&MOMENTS, &format!("{good}x,1,1,1,1\n")).is_err());
        assert!(validate_csv(&MOMENTS, &format!("{good}0,1,1,1\n")).is_err());
        assert!(validate_csv(&MOMENTS, "expert,mean\n0,1\n").is_err());
        assert!(validate_csv(&MOMENTS, &good.replace('\n', "\r\n")).is_err());
        assert!(validate_csv(&ACCOUNTING, "preset,method,params,proportion,flops\nv,m,1,2.245,\n").is_err());
        assert_eq!(validate_csv(&ACCOUNTING, "preset,method,params,proportion,flops\nv,m,1,2.24,\n").unwrap(), 1);
    }

    #[test]
    fn directory_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(VERIFY);
        t.push(vec!["a".into(), float(1.0), "<=".into(), float(2.0), "pass".into()]);
        t.write(dir.path()).unwrap();
        RunSummary::new("verify", 1, vec!["verify.csv".into()], serde_json::json!({})).write(dir.path()).unwrap();
        let check = check_dir(dir.path()).unwrap();
        assert_eq!(check.tables, vec![("verify.csv".to_string(), 1)]);

        fs::write(dir.path().join("verify.csv"), "check,measured\n").unwrap();
        assert!(matches!(check_dir(dir.path()), Err(Error::Schema(_))));
    }
}
