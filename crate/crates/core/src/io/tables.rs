use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::trainer::FitReport;

pub const FIT_REPORT_HEADER: [&str; 8] = [
    "iteration",
    "sim",
    "zero_anchor",
    "spatial",
    "temporal",
    "monotonic",
    "total",
    "wall_ms",
];

pub const METRICS_HEADER: [&str; 6] = [
    "time",
    "label",
    "mean_jac",
    "mean_djac_dt",
    "dice",
    "sign_consistency",
];

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

pub fn encode_fit_report(report: &FitReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FIT_REPORT_HEADER)?;
    for e in &report.history {
        let l = &e.loss;
        w.write_record([
            e.iteration.to_string(),
            l.sim.to_string(),
            l.zero_anchor.to_string(),
            l.spatial.to_string(),
            l.temporal.to_string(),
            l.monotonic.to_string(),
            l.total.to_string(),
            e.wall_ms.to_string(),
        ])?;
    }
    finish(w)
}

pub fn encode_metrics(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.time.to_string(),
            r.label.to_string(),
            r.mean_jac.to_string(),
            r.mean_djac_dt.to_string(),
            r.dice.map(|d| d.to_string()).unwrap_or_default(),
            r.sign_consistency.to_string(),
        ])?;
    }
    finish(w)
}

/// One row per logged iteration.
pub fn write_fit_report_csv(path: &Path, report: &FitReport) -> Result<()> {
    super::write_atomic(path, &encode_fit_report(report)?)
}

/// One row per (time, label); `dice` is empty where no labels were available.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    super::write_atomic(path, &encode_metrics(rows)?)
}
