//! Loss and metric curves as SVG, and a cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::history::{self, Record};
use crate::trainer::{CHECKPOINT_FILE, TEST_REPORT_FILE};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A static line chart with axes, tick labels and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{colour}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            ly - 4.0,
            WIDTH - MARGIN - 96.0,
            ly,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Per-step loss curves of one run.
pub fn loss_series(records: &[Record]) -> Vec<Series> {
    let mut by_name: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let Record::Step(s) = r {
            let x = s.step as f64;
            let named = [
                ("total", Some(s.total)),
                ("sup1", Some(s.sup1)),
                ("sup2", s.sup2),
                ("semi1", s.semi1),
                ("semi2", s.semi2),
                ("con", s.con),
                ("mac", s.mac),
            ];
            for (name, v) in named {
                if let Some(v) = v {
                    by_name.entry(name).or_default().push((x, v));
                }
            }
        }
    }
    let order = ["total", "sup1", "sup2", "semi1", "semi2", "con", "mac"];
    order
        .iter()
        .filter_map(|n| by_name.remove(n).map(|points| Series { name: n.to_string(), points }))
        .collect()
}

/// Per-epoch validation DSC and mean loss of one run.
pub fn metric_series(records: &[Record]) -> Vec<Series> {
    let epochs: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            _ => None,
        })
        .collect();
    let pick = |f: &dyn Fn(&crate::history::EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        epochs.iter().filter_map(|e| f(e).map(|v| (e.epoch as f64, v))).collect()
    };
    vec![
        Series { name: "val dsc".into(), points: pick(&|e| e.val_dsc) },
        Series { name: "best val dsc".into(), points: pick(&|e| e.best_val_dsc) },
    ]
}

/// One run's row in the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub losses: String,
    pub epochs: usize,
    pub steps: u64,
    pub final_total: f64,
    pub best_val_dsc: Option<f64>,
    /// Test (dsc, hd95, asd) from a sibling report, if any.
    pub test: Option<(f64, f64, f64)>,
}

fn read_test_report(path: &Path) -> Result<Option<(f64, f64, f64)>> {
    if !path.exists() {
        return Ok(None);
    }
    let bad = |e: String| Error::Dataset(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut sums = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(format!("bad row {row:?}")));
        sums.0 += num(1)?;
        sums.1 += num(2)?;
        sums.2 += num(3)?;
        n += 1;
    }
    Ok((n > 0).then(|| (sums.0 / n as f64, sums.1 / n as f64, sums.2 / n as f64)))
}

/// Summarises a history file, picking up the run's mode from the
/// checkpoint and its test metrics from the report next to it.
pub fn summarise(path: &Path, records: &[Record]) -> Result<RunSummary> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let ckpt = dir.join(CHECKPOINT_FILE);
    let (mode, losses) = if ckpt.exists() {
        let meta = checkpoint::info(&ckpt)?.metadata;
        (meta.get("mode").cloned().unwrap_or_default(), meta.get("toggles").cloned().unwrap_or_default())
    } else {
        (String::new(), String::new())
    };
    let run = dir
        .file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| path.display().to_string());
    let mut summary = RunSummary {
        run,
        mode,
        losses,
        epochs: 0,
        steps: 0,
        final_total: f64::NAN,
        best_val_dsc: None,
        test: read_test_report(&dir.join(TEST_REPORT_FILE))?,
    };
    for r in records {
        match r {
            Record::Step(s) => {
                summary.steps += 1;
                summary.final_total = s.total;
            }
            Record::Epoch(e) => {
                summary.epochs = e.epoch + 1;
                summary.best_val_dsc = e.best_val_dsc.or(summary.best_val_dsc);
            }
        }
    }
    Ok(summary)
}

fn file_stem_for(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub plots: Vec<PathBuf>,
    pub table: PathBuf,
    pub rows: Vec<RunSummary>,
}

/// Reads every history, writes a loss plot and a metric plot per run and
/// one `comparison.csv` row per run.
pub fn report(histories: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    if histories.is_empty() {
        return Err(Error::Usage("report needs at least one history file".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut plots = Vec::new();
    let mut rows = Vec::new();
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for path in histories {
        let records = history::read(path)?;
        let summary = summarise(path, &records)?;
        let mut stem = file_stem_for(&summary.run);
        let count = used.entry(stem.clone()).or_default();
        *count += 1;
        if *count > 1 {
            stem = format!("{stem}_{count}");
        }
        let loss = out_dir.join(format!("{stem}_loss.svg"));
        let metric = out_dir.join(format!("{stem}_metrics.svg"));
        std::fs::write(&loss, line_chart(&format!("{} losses", summary.run), "step", &loss_series(&records)))
            .map_err(Error::io(&loss))?;
        std::fs::write(&metric, line_chart(&format!("{} validation", summary.run), "epoch", &metric_series(&records)))
            .map_err(Error::io(&metric))?;
        plots.push(loss);
        plots.push(metric);
        rows.push(summary);
    }
    let table = out_dir.join("comparison.csv");
    write_table(&rows, &table)?;
    Ok(ReportOutput { plots, table, rows })
}

fn write_table(rows: &[RunSummary], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["mode", "losses", "run", "epochs", "steps", "final_total", "best_val_dsc", "dsc", "hd95", "asd"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.losses.clone(),
            r.run.clone(),
            r.epochs.to_string(),
            r.steps.to_string(),
            format!("{:.6}", r.final_total),
            opt(r.best_val_dsc),
            opt(r.test.map(|t| t.0)),
            opt(r.test.map(|t| t.1)),
            opt(r.test.map(|t| t.2)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}
