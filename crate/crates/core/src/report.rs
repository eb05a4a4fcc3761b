//! Run artefacts: CSV traces, metrics, drift, summary and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::protocol::{DriftRow, ScenarioResult, TraceRow};

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DRIFT_FILE: &str = "drift.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Shortest text that round-trips to the same `f64` bits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "epoch", "iter", "lr", "L_mbce", "L_kd", "L_dkd", "L_ac", "L_total"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.iter.to_string(),
            num(r.lr),
            num(r.l_mbce),
            num(r.l_kd),
            num(r.l_dkd),
            num(r.l_ac),
            num(r.l_total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per class and step, then one aggregate row per step with an
/// empty `class_id`.
pub fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "class_id", "iou", "miou_b", "miou_n", "miou_all", "hiou"])?;
    for rep in reports {
        for c in &rep.per_class {
            w.write_record([
                rep.step.to_string(),
                c.class_id.to_string(),
                opt(c.iou),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            rep.step.to_string(),
            String::new(),
            String::new(),
            num(rep.miou_b),
            opt(rep.miou_n),
            num(rep.miou_all),
            opt(rep.hiou),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_drift(path: &Path, rows: &[DriftRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "iter", "dz", "dz_plus", "dz_minus"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.iter.to_string(),
            num(r.stats.dz),
            num(r.stats.dz_plus),
            num(r.stats.dz_minus),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub classes: Vec<u8>,
    pub train_images: usize,
    pub start_false_activation: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub scenario: String,
    pub setting: String,
    pub seed: u64,
    pub num_classes: usize,
    pub steps: Vec<StepSummary>,
    #[serde(rename = "final")]
    pub final_metrics: MetricsReport,
    /// The fully resolved configuration the run was started with.
    pub config: serde_json::Value,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes every artefact of a finished scenario into `dir`. Single-step runs
/// have no drift rows and get no drift file.
pub fn write_run(dir: &Path, result: &ScenarioResult, summary: &RunSummary, checkpoints: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let trace: Vec<TraceRow> = result.steps.iter().flat_map(|s| s.trace.iter().cloned()).collect();
    let drift: Vec<DriftRow> = result.steps.iter().flat_map(|s| s.drift.iter().cloned()).collect();
    let reports: Vec<MetricsReport> = result.steps.iter().map(|s| s.report.clone()).collect();
    write_trace(&dir.join(TRACE_FILE), &trace)?;
    write_metrics(&dir.join(METRICS_FILE), &reports)?;
    if !drift.is_empty() {
        write_drift(&dir.join(DRIFT_FILE), &drift)?;
    }
    if checkpoints {
        for s in &result.steps {
            s.state.save(&dir.join(format!("step_{}", s.step)))?;
        }
    }
    // last, so a present summary marks a complete run
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}
