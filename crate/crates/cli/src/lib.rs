//! Command-line runner for the kincycle experiments.
//!
//! `kincycle run <experiment>` resolves a [`config::ExperimentConfig`], runs
//! each experiment on a rayon pool and writes CSV tables plus `report.json`
//! and `timings.json` to the output directory. Results depend on the config
//! only: the worker count changes wall-clock time, never a byte of output.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use config::ExperimentConfig;
use report::{Outcome, Status};

/// Process exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Run every experiment selected by `cfg`, writing results under `out`.
/// Tables are written as soon as each experiment finishes, so a later
/// failure still leaves earlier results on disk.
pub fn execute(cfg: &ExperimentConfig, out: &Path, workers: usize) -> std::io::Result<Vec<Outcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(std::io::Error::other)?;
    let mut outcomes = Vec::new();
    let mut seconds = BTreeMap::new();
    for e in cfg.experiment.expand() {
        let start = Instant::now();
        let outcome = pool.install(|| experiments::run_experiment(e, cfg));
        let dt = start.elapsed().as_secs_f64();
        seconds.insert(e.name().to_string(), dt);
        report::write_tables(out, &outcome)?;
        let failed = outcome.checks.iter().filter(|c| !c.pass).count();
        let status = match outcome.status() {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Error => "ERROR",
        };
        eprintln!("{status:5} {:16} {:3} checks, {failed} failed  {dt:7.2}s", e.name(), outcome.checks.len());
        for c in outcome.checks.iter().filter(|c| !c.pass) {
            eprintln!("      fail {}: {} ({}, threshold {})", c.id, c.value, c.detail, c.threshold);
        }
        if let Some(err) = &outcome.error {
            eprintln!("      error: {err}");
        }
        outcomes.push(outcome);
        report::write_report(out, cfg, &outcomes, &seconds, workers)?;
    }
    Ok(outcomes)
}
