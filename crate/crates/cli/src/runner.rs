//! Executes the experiment matrix and writes run directories.

use std::fs;

use log::{info, warn};
use rayon::prelude::*;

use ciss::protocol::{run_scenario, ScenarioResult};
use ciss::report::{self, RunSummary, StepSummary};
use ciss::synthdata::{generate, ScenarioPlan};

use crate::config::RunSpec;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Skipped,
}

fn summarize(spec: &RunSpec, plan: &ScenarioPlan, result: &ScenarioResult) -> CliResult<RunSummary> {
    let steps = result
        .steps
        .iter()
        .map(|s| {
            Ok(StepSummary {
                step: s.step,
                classes: plan.classes(s.step)?.to_vec(),
                train_images: s.train_images,
                start_false_activation: s.start_false_activation,
                metrics: s.report.clone(),
            })
        })
        .collect::<ciss::Result<Vec<_>>>()?;
    Ok(RunSummary {
        name: spec.run_name.clone(),
        scenario: spec.config.scenario.clone(),
        setting: plan.setting().to_string(),
        seed: spec.config.train.seed,
        num_classes: spec.config.data.num_classes,
        steps,
        final_metrics: result.final_report().clone(),
        config: spec.echo.clone(),
    })
}

/// Runs one matrix entry unless a completed run already exists.
pub fn run_one(spec: &RunSpec, force: bool) -> CliResult<RunStatus> {
    let dir = spec.dir();
    if dir.join(report::SUMMARY_FILE).exists() && !force {
        info!("{}: already complete, skipping (use --force to rerun)", spec.run_name);
        return Ok(RunStatus::Skipped);
    }
    if dir.exists() {
        warn!("{}: replacing {}", spec.run_name, dir.display());
        fs::remove_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    info!("{}: starting", spec.run_name);
    let c = &spec.config;
    let plan = c.plan()?;
    let pools = generate(&c.data)?;
    let result = run_scenario(&plan, &pools, c.data.num_classes, &c.model, &c.train)?;
    let summary = summarize(spec, &plan, &result)?;
    report::write_run(&dir, &result, &summary, c.checkpoints)?;
    let f = result.final_report();
    info!(
        "{}: done, mIoU_all {:.2}, hIoU {}",
        spec.run_name,
        f.miou_all,
        f.hiou.map_or("-".to_string(), |h| format!("{h:.2}"))
    );
    Ok(RunStatus::Completed)
}

/// Runs every entry with at most `jobs` in flight. Returns the first error
/// in matrix order after all entries have finished.
pub fn run_all(specs: &[RunSpec], jobs: usize, force: bool) -> CliResult<Vec<RunStatus>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let results: Vec<CliResult<RunStatus>> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| run_one(s, force).map_err(|e| e.context(&s.run_name)))
            .collect()
    });
    results.into_iter().collect()
}
