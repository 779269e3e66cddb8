//! Run outputs: per-experiment CSV tables, `report.json` and `timings.json`.
//!
//! Everything in `report.json` and the CSVs is a function of the resolved
//! config. Wall-clock times, the worker count and the output directory live
//! in `timings.json` only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};

/// One pass/fail decision. `value` is compared against `threshold` in the
/// direction described by `detail`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub id: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

/// A CSV table: one observable per column, one point per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width of {}", self.name);
        self.rows.push(row);
    }

    /// Column values of a numeric column, for tests and summaries.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }

    fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()
    }
}

/// Builds a CSV row from heterogeneous values. Floats use the shortest
/// representation that round-trips.
#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$(format!("{}", $x)),*] };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

/// Result of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub experiment: Experiment,
    pub checks: Vec<Check>,
    /// Fitted exponents, constants and other summary numbers.
    pub fits: BTreeMap<String, f64>,
    pub tables: Vec<Table>,
    pub error: Option<String>,
}

impl Outcome {
    pub fn new(experiment: Experiment) -> Self {
        Self { experiment, checks: vec![], fits: BTreeMap::new(), tables: vec![], error: None }
    }

    /// Record a check of `value <= threshold`.
    pub fn check_le(&mut self, id: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check { id: id.into(), pass: value <= threshold, value, threshold, detail: "value <= threshold".into() });
    }

    /// Record a check of `value >= threshold`.
    pub fn check_ge(&mut self, id: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check { id: id.into(), pass: value >= threshold, value, threshold, detail: "value >= threshold".into() });
    }

    /// Record a check of |value − target| <= tol.
    pub fn check_near(&mut self, id: impl Into<String>, value: f64, target: f64, tol: f64) {
        self.checks.push(Check {
            id: id.into(),
            pass: (value - target).abs() <= tol,
            value,
            threshold: tol,
            detail: format!("|value - ({target})| <= threshold"),
        });
    }

    pub fn fit(&mut self, key: impl Into<String>, value: f64) {
        self.fits.insert(key.into(), value);
    }

    pub fn status(&self) -> Status {
        if self.error.is_some() {
            Status::Error
        } else if self.checks.iter().all(|c| c.pass) {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn passed(&self) -> bool {
        self.status() == Status::Pass
    }

    pub fn check(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn files(&self) -> Vec<String> {
        self.tables.iter().map(|t| format!("{}/{}.csv", self.experiment, t.name)).collect()
    }
}

#[derive(Serialize)]
struct ExperimentReport<'a> {
    name: &'static str,
    status: Status,
    error: &'a Option<String>,
    checks: &'a [Check],
    fits: &'a BTreeMap<String, f64>,
    files: Vec<String>,
}

/// Schema of `report.json`.
#[derive(Serialize)]
struct Report<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: Experiment,
    pass: bool,
    config_hash: String,
    config_toml: String,
    config: &'a ExperimentConfig,
    experiments: Vec<ExperimentReport<'a>>,
}

#[derive(Serialize)]
struct Timings<'a> {
    workers: usize,
    out: String,
    total_seconds: f64,
    experiments: &'a BTreeMap<String, f64>,
}

/// Write the CSV tables of one outcome under `out/<experiment>/`.
pub fn write_tables(out: &Path, outcome: &Outcome) -> std::io::Result<()> {
    if outcome.tables.is_empty() {
        return Ok(());
    }
    let dir = out.join(outcome.experiment.name());
    fs::create_dir_all(&dir)?;
    for t in &outcome.tables {
        t.write(&dir.join(format!("{}.csv", t.name)))?;
    }
    Ok(())
}

/// Write `report.json` and `timings.json`; returns the report path.
pub fn write_report(
    out: &Path,
    cfg: &ExperimentConfig,
    outcomes: &[Outcome],
    seconds: &BTreeMap<String, f64>,
    workers: usize,
) -> std::io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let report = Report {
        tool: "kincycle",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment,
        pass: outcomes.iter().all(Outcome::passed),
        config_hash: cfg.hash(),
        config_toml: cfg.to_toml(),
        config: cfg,
        experiments: outcomes
            .iter()
            .map(|o| ExperimentReport {
                name: o.experiment.name(),
                status: o.status(),
                error: &o.error,
                checks: &o.checks,
                fits: &o.fits,
                files: o.files(),
            })
            .collect(),
    };
    let path = out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let timings = Timings { workers, out: out.display().to_string(), total_seconds: seconds.values().sum(), experiments: seconds };
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(path)
}
