//! Markdown comparison of final-step metrics across runs.

use std::path::{Path, PathBuf};

use ciss::metrics::MetricsReport;
use ciss::report::{RunSummary, SUMMARY_FILE};

use crate::error::{CliError, CliResult};

const COLUMNS: [&str; 4] = ["mIoU_b", "mIoU_n", "hIoU", "mIoU_all"];

/// Run name without its trailing `_seed<N>`.
pub fn group_name(run: &str) -> &str {
    match run.rsplit_once("_seed") {
        Some((head, tail)) if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) => head,
        _ => run,
    }
}

/// Mean and sample standard deviation; the deviation is absent for one value.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn metric(r: &MetricsReport, col: &str) -> Option<f64> {
    match col {
        "mIoU_b" => Some(r.miou_b),
        "mIoU_n" => r.miou_n,
        "hIoU" => r.hiou,
        _ => Some(r.miou_all),
    }
}

fn load(dir: &Path) -> CliResult<RunSummary> {
    let p = dir.join(SUMMARY_FILE);
    if !p.is_file() {
        return Err(CliError::Invalid(format!("{} not found (is the run complete?)", p.display())));
    }
    RunSummary::load(&p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
}

pub fn table(summaries: &[RunSummary]) -> CliResult<String> {
    let first = summaries
        .first()
        .ok_or_else(|| CliError::Invalid("no runs to compare".into()))?;
    for s in summaries {
        if (&s.scenario, &s.setting, s.num_classes) != (&first.scenario, &first.setting, first.num_classes) {
            return Err(CliError::Invalid(format!(
                "mismatched scenarios: {} is {} {} (K={}), {} is {} {} (K={})",
                first.name, first.scenario, first.setting, first.num_classes, s.name, s.scenario, s.setting, s.num_classes
            )));
        }
    }
    let mut groups: Vec<(&str, Vec<&RunSummary>)> = Vec::new();
    for s in summaries {
        let g = group_name(&s.name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, v)) => v.push(s),
            None => groups.push((g, vec![s])),
        }
    }
    let mut rows = vec![[vec!["run".to_string(), "runs".to_string()], COLUMNS.map(String::from).to_vec()].concat()];
    for (name, runs) in &groups {
        let mut row = vec![name.to_string(), runs.len().to_string()];
        for col in COLUMNS {
            let xs: Vec<f64> = runs.iter().filter_map(|r| metric(&r.final_metrics, col)).collect();
            row.push(if xs.len() < runs.len() {
                "-".to_string()
            } else {
                match mean_std(&xs) {
                    (m, Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                    (m, None) => format!("{m:.2}"),
                }
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let pad = |s: &str, w: usize, left: bool| {
        let fill = " ".repeat(w - s.chars().count());
        if left {
            format!("{s}{fill}")
        } else {
            format!("{fill}{s}")
        }
    };
    let mut out = format!("{} {} ({} classes)\n\n", first.scenario, first.setting, first.num_classes);
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, s)| pad(s, widths[c], c == 0)).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            let rule: Vec<String> = widths
                .iter()
                .enumerate()
                .map(|(c, &w)| if c == 0 { "-".repeat(w) } else { format!("{}:", "-".repeat(w - 1)) })
                .collect();
            out.push_str(&format!("| {} |\n", rule.join(" | ")));
        }
    }
    Ok(out)
}

pub fn compare_dirs(dirs: &[PathBuf]) -> CliResult<String> {
    let summaries = dirs.iter().map(|d| load(d)).collect::<CliResult<Vec<_>>>()?;
    table(&summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, scenario: &str, b: f64, n: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            scenario: scenario.into(),
            setting: "overlapped".into(),
            seed: 1,
            num_classes: 6,
            steps: Vec::new(),
            final_metrics: MetricsReport {
                step: 3,
                per_class: Vec::new(),
                miou_b: b,
                miou_n: Some(n),
                miou_all: (b + n) / 2.0,
                hiou: Some(ciss::metrics::harmonic_mean(b, n)),
            },
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn group_names_strip_the_seed() {
        assert_eq!(group_name("exp-mbce_seed12"), "exp-mbce");
        assert_eq!(group_name("exp_seedling"), "exp_seedling");
        assert_eq!(group_name("plain"), "plain");
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, Some(1.0)));
        assert_eq!(mean_std(&[4.0, 4.0]).1, Some(0.0));
    }

    #[test]
    fn two_groups_four_metric_columns() {
        let runs = [
            summary("full_seed1", "4-1", 80.0, 40.0),
            summary("full_seed2", "4-1", 82.0, 42.0),
            summary("mbce_seed1", "4-1", 50.0, 30.0),
            summary("mbce_seed2", "4-1", 50.0, 30.0),
        ];
        let t = table(&runs).unwrap();
        let lines: Vec<&str> = t.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("mIoU_b") && lines[0].find("mIoU_n") < lines[0].find("hIoU"));
        assert!(lines[2].starts_with("| full ") && lines[2].contains("81.00 ± 1.41"));
        assert!(lines[3].contains("50.00 ± 0.00"));
        let widths: Vec<usize> = lines.iter().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
    }

    #[test]
    fn single_run_has_no_std() {
        let t = table(&[summary("a_seed1", "4-1", 80.0, 40.0)]).unwrap();
        assert!(!t.contains('±'));
        assert!(t.contains("80.00"));
    }

    #[test]
    fn mismatched_scenarios_are_rejected() {
        let e = table(&[summary("a_seed1", "4-1", 1.0, 1.0), summary("b_seed1", "3-1", 1.0, 1.0)]).unwrap_err();
        assert!(e.to_string().contains("mismatched"));
    }
}
