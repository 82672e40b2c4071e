//! Summaries of training logs: the validation rank-1 / alignment series, a
//! two-series SVG plot, and a comparison table across runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainLogRow;

/// One validation point with the epoch's mean alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub epoch: usize,
    pub step: usize,
    pub val_rank1: f64,
    pub align: f64,
}

pub fn validation_series(rows: &[TrainLogRow]) -> Vec<SeriesRow> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, r) in rows.iter().enumerate() {
        let epoch_ends = rows.get(i + 1).is_none_or(|n| n.epoch != r.epoch);
        if let Some(v) = r.val_rank1 {
            let epoch_rows = rows[start..=i].iter().filter(|x| x.epoch == r.epoch);
            let (sum, n) = epoch_rows.fold((0.0, 0usize), |(s, n), x| (s + x.align, n + 1));
            out.push(SeriesRow {
                epoch: r.epoch,
                step: r.step,
                val_rank1: v,
                align: sum / n as f64,
            });
        }
        if epoch_ends {
            start = i + 1;
        }
    }
    out
}

pub fn write_series_csv(series: &[SeriesRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::MalformedLog(e.to_string()))?;
    if series.is_empty() {
        w.write_record(["epoch", "step", "val_rank1", "align"])
            .map_err(|e| Error::MalformedLog(e.to_string()))?;
    }
    for s in series {
        w.serialize(s).map_err(|e| Error::MalformedLog(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let mut s = String::new();
    for (x, y) in points {
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        s.trim_end()
    )
}

/// Rank-1 (left axis, 0..1) at each validation and the per-step alignment
/// loss (right axis) against training step.
pub fn render_plot_svg(rows: &[TrainLogRow], title: &str) -> String {
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let max_align = rows
        .iter()
        .map(|r| r.align)
        .filter(|a| a.is_finite())
        .fold(0.0f64, f64::max);
    let max_align = if max_align > 0.0 { max_align } else { 1.0 };
    let x = |step: usize| PAD + (W - 2.0 * PAD) * step as f64 / max_step;
    let y = |frac: f64| H - PAD - (H - 2.0 * PAD) * frac;

    let align: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.step), y(r.align / max_align))).collect();
    let rank1: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.val_rank1.map(|v| (x(r.step), y(v))))
        .collect();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (PAD, W - PAD, y(0.0), y(1.0));
    let _ = writeln!(
        svg,
        "<path d=\"M{x0},{y1} L{x0},{y0} L{x1},{y0} L{x1},{y1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#1f77b4\">{f:.2}</text>",
            x0 - 4.0,
            y(f) + 3.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#d62728\">{:.3}</text>",
            x1 + 4.0,
            y(f) + 3.0,
            f * max_align
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">step (0 to {})</text>",
        W / 2.0,
        H - 16.0,
        max_step
    );
    svg.push_str(&polyline(&align, "#d62728"));
    svg.push_str(&polyline(&rank1, "#1f77b4"));
    for (px, py) in &rank1 {
        let _ = writeln!(svg, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"#1f77b4\"/>");
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"44\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">val rank-1</text>",
        PAD + 8.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"58\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">alignment loss</text>",
        PAD + 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row per run of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub epochs: usize,
    pub steps: usize,
    pub best_val_rank1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_total: Option<f64>,
    pub final_align: Option<f64>,
}

pub fn comparison_row(run: &str, rows: &[TrainLogRow]) -> ComparisonRow {
    let best = rows
        .iter()
        .filter_map(|r| r.val_rank1.map(|v| (v, r.epoch)))
        .fold(None::<(f64, usize)>, |b, (v, e)| match b {
            Some((bv, _)) if bv >= v => b,
            _ => Some((v, e)),
        });
    ComparisonRow {
        run: run.to_owned(),
        epochs: rows.last().map_or(0, |r| r.epoch + 1),
        steps: rows.len(),
        best_val_rank1: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
        final_total: rows.last().map(|r| r.total),
        final_align: rows.last().map(|r| r.align),
    }
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::MalformedLog(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::MalformedLog(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
