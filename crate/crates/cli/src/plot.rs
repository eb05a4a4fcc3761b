//! Static SVG line charts of metrics and drift.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use ciss::report::{DRIFT_FILE, METRICS_FILE};

use crate::error::{CliError, CliResult};

pub const MIOU_SVG: &str = "miou_over_steps.svg";
pub const DRIFT_SVG: &str = "drift.svg";

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Positions of labelled vertical grid lines.
    pub x_ticks: Vec<(f64, String)>,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let span = |(a, b): (f64, f64)| if b > a { (a, b - a) } else { (a - 0.5, 1.0) };
        let (x0, xs) = span(self.x_range);
        let (y0, ys) = span(self.y_range);
        let px = |x: f64| LEFT + (x - x0) / xs * pw;
        let py = |y: f64| TOP + ph - (y - y0) / ys * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        for i in 0..=4 {
            let y = y0 + ys * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#dddddd"/><text x="{2:.2}" y="{3:.2}" text-anchor="end">{4}</text>"##,
                py(y),
                LEFT + pw,
                LEFT - 6.0,
                py(y) + 4.0,
                tick(y)
            );
        }
        for (x, label) in &self.x_ticks {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.2}" y1="{TOP:.2}" x2="{0:.2}" y2="{1:.2}" stroke="#dddddd"/><text x="{0:.2}" y="{2:.2}" text-anchor="middle">{3}</text>"##,
                px(*x),
                TOP + ph,
                TOP + ph + 16.0,
                esc(label)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0:.2}" text-anchor="middle" transform="rotate(-90 16 {0:.2})">{1}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, ser) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let dash = if ser.dashed { r#" stroke-dasharray="6 3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline data-series="{}" fill="none" stroke="{colour}" stroke-width="2"{dash} points="{}"/>"#,
                esc(&ser.label),
                pts.join(" ")
            );
            if ser.points.len() <= 12 {
                for &(x, y) in &ser.points {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, px(x), py(y));
                }
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 15.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                esc(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(y: f64) -> String {
    if y.abs() >= 1.0 || y == 0.0 {
        format!("{y:.1}")
    } else {
        format!("{y:.3}")
    }
}

fn read_rows(path: &Path) -> CliResult<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let bad = |e: csv::Error| CliError::Invalid(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    let header = r.headers().map_err(bad)?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(bad)?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> CliResult<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Invalid(format!("{}: missing column {name}", path.display())))
}

fn cell(row: &csv::StringRecord, i: usize, path: &Path) -> CliResult<Option<f64>> {
    let v = row.get(i).unwrap_or("");
    if v.is_empty() {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| CliError::Invalid(format!("{}: bad number {v:?}", path.display())))
}

fn push(series: &mut Vec<Series>, label: String, dashed: bool, p: (f64, f64)) {
    match series.iter_mut().find(|s| s.label == label) {
        Some(s) => s.points.push(p),
        None => series.push(Series {
            label,
            points: vec![p],
            dashed,
        }),
    }
}

/// Per-class IoU and aggregate lines over steps.
pub fn miou_chart(path: &Path) -> CliResult<Chart> {
    let (h, rows) = read_rows(path)?;
    let [step, class, iou, mb, mn, ma, hi] = ["step", "class_id", "iou", "miou_b", "miou_n", "miou_all", "hiou"]
        .map(|n| column(&h, n, path));
    let (step, class, iou) = (step?, class?, iou?);
    let aggregates = [("mIoU_b", mb?), ("mIoU_n", mn?), ("mIoU_all", ma?), ("hIoU", hi?)];
    let mut classes = Vec::new();
    let mut aggs = Vec::new();
    let mut last_step = 1.0f64;
    for row in &rows {
        let t = cell(row, step, path)?
            .ok_or_else(|| CliError::Invalid(format!("{}: row without a step", path.display())))?;
        last_step = last_step.max(t);
        match row.get(class).unwrap_or("") {
            "" => {
                for (label, i) in aggregates {
                    if let Some(v) = cell(row, i, path)? {
                        push(&mut aggs, label.to_string(), true, (t, v));
                    }
                }
            }
            c => {
                if let Some(v) = cell(row, iou, path)? {
                    push(&mut classes, format!("class {c}"), false, (t, v));
                }
            }
        }
    }
    if classes.is_empty() && aggs.is_empty() {
        return Err(CliError::Invalid(format!("{}: no metric rows", path.display())));
    }
    classes.sort_by_key(|s| s.label.trim_start_matches("class ").parse::<u32>().unwrap_or(u32::MAX));
    aggs.sort_by_key(|s| aggregates.iter().position(|a| a.0 == s.label));
    classes.extend(aggs);
    let n = last_step as usize;
    Ok(Chart {
        title: "mIoU over steps".into(),
        x_label: "step".into(),
        y_label: "IoU (%)".into(),
        x_range: (1.0, last_step),
        y_range: (0.0, 100.0),
        x_ticks: (1..=n).map(|t| (t as f64, t.to_string())).collect(),
        series: classes,
    })
}

/// Drift of the full, positive and negative logits against the previous
/// model, over training iterations concatenated across steps.
pub fn drift_chart(path: &Path) -> CliResult<Option<Chart>> {
    let (h, rows) = read_rows(path)?;
    let step = column(&h, "step", path)?;
    let iter = column(&h, "iter", path)?;
    let cols = [("dz", "Δz"), ("dz_plus", "Δz⁺"), ("dz_minus", "Δz⁻")]
        .into_iter()
        .map(|(c, l)| column(&h, c, path).map(|i| (i, l)))
        .collect::<CliResult<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(None);
    }
    let mut series: Vec<Series> = Vec::new();
    let mut ticks = Vec::new();
    let (mut offset, mut cur_step, mut last_x, mut y_max) = (0.0, None, 0.0f64, 0.0f64);
    for row in &rows {
        let t = cell(row, step, path)?.unwrap_or(0.0);
        let k = cell(row, iter, path)?.unwrap_or(0.0);
        if cur_step != Some(t) {
            offset = last_x;
            cur_step = Some(t);
            ticks.push((offset, format!("step {t}")));
        }
        let x = offset + k;
        last_x = x;
        for &(i, label) in &cols {
            if let Some(v) = cell(row, i, path)? {
                y_max = y_max.max(v);
                push(&mut series, label.to_string(), false, (x, v));
            }
        }
    }
    Ok(Some(Chart {
        title: "Logit drift from the previous model".into(),
        x_label: "iteration".into(),
        y_label: "RMS drift".into(),
        x_range: (0.0, last_x),
        y_range: (0.0, if y_max > 0.0 { y_max * 1.05 } else { 1.0 }),
        x_ticks: ticks,
        series,
    }))
}

/// Writes the charts for a run directory and returns the files written.
pub fn plot_dir(dir: &Path) -> CliResult<Vec<String>> {
    let metrics = dir.join(METRICS_FILE);
    if !metrics.is_file() {
        return Err(CliError::Invalid(format!("{} not found", metrics.display())));
    }
    let write = |name: &str, chart: &Chart| {
        let p = dir.join(name);
        fs::write(&p, chart.to_svg()).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write(MIOU_SVG, &miou_chart(&metrics)?)?;
    let mut written = vec![MIOU_SVG.to_string()];
    let drift = dir.join(DRIFT_FILE);
    match drift.is_file().then(|| drift_chart(&drift)).transpose()?.flatten() {
        Some(chart) => {
            write(DRIFT_SVG, &chart)?;
            written.push(DRIFT_SVG.to_string());
        }
        None => warn!("{}: no drift data, only the mIoU plot was written", dir.display()),
    }
    Ok(written)
}
