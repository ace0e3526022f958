//! Report generation: the results CSV, a JSON summary, and an SVG panel with
//! per-cell null boxplots, observed s-validation curves, and the validation
//! sanity curve on a log-epoch axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permnull::{quantile, sorted_copy};
use crate::runner::CellResult;

pub const CSV_HEADER: &str = "run,epoch,fraction,B,observed,baseline,null_min,null_q25,\
null_median,null_q75,null_max,p_value,verdict,validation_acc,dnn_train_acc,seed";

/// Render with six significant digits, plain decimal notation.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.000000".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(cell: &CellResult) -> String {
    let sorted = sorted_copy(&cell.null.scores);
    let cols = [
        csv_field(&cell.run_label),
        cell.epoch.to_string(),
        fmt_sig6(cell.fraction),
        cell.null.b.to_string(),
        fmt_sig6(cell.null.observed),
        fmt_sig6(cell.null.baseline),
        fmt_sig6(sorted[0]),
        fmt_sig6(quantile(&sorted, 0.25)),
        fmt_sig6(quantile(&sorted, 0.5)),
        fmt_sig6(quantile(&sorted, 0.75)),
        fmt_sig6(sorted[sorted.len() - 1]),
        fmt_sig6(cell.diagnosis.p_value),
        cell.diagnosis.verdict.as_str().to_string(),
        fmt_sig6(cell.validation_accuracy),
        fmt_sig6(cell.dnn_train_accuracy),
        cell.null.seed.to_string(),
    ];
    cols.join(",")
}

/// Write the per-cell results table. Byte output is a pure function of the
/// input cells.
pub fn write_results_csv(cells: &[CellResult], path: &Path) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("no cells to report".into()));
    }
    let mut text = String::with_capacity(cells.len() * 160);
    text.push_str(CSV_HEADER);
    text.push('\n');
    for cell in cells {
        text.push_str(&csv_row(cell));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub run_label: String,
    pub cells: Vec<CellResult>,
}

/// Write the JSON mirror of the result table.
pub fn write_summary_json(cells: &[CellResult], path: &Path) -> Result<()> {
    let first = cells
        .first()
        .ok_or_else(|| Error::EmptyInput("no cells to report".into()))?;
    let summary = Summary {
        run_label: first.run_label.clone(),
        cells: cells.to_vec(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// SVG panel
// ---------------------------------------------------------------------------

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 600.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 200.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;
const BOX_W: f64 = 7.0;

/// Color per shuffle fraction: darker blues for lighter perturbations, grey
/// for a full shuffle.
fn fraction_color(fraction: f64, rank: usize, count: usize) -> String {
    const CANONICAL: [(f64, &str); 4] = [
        (0.01, "#00008b"),
        (0.05, "#1f77b4"),
        (0.10, "#26c6da"),
        (1.00, "#9e9e9e"),
    ];
    for (f, c) in CANONICAL {
        if (fraction - f).abs() < 1e-9 {
            return c.to_string();
        }
    }
    // Fallback ramp: dark blue toward grey with increasing fraction rank.
    let t = if count <= 1 {
        0.0
    } else {
        rank as f64 / (count - 1) as f64
    };
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(16.0, 158.0),
        lerp(16.0, 158.0),
        lerp(139.0, 158.0)
    )
}

struct Scales {
    log_max: f64,
    plot_w: f64,
    plot_h: f64,
}

impl Scales {
    fn x(&self, epoch: usize) -> f64 {
        let t = if self.log_max <= 0.0 {
            0.5
        } else {
            (epoch as f64).log10() / self.log_max
        };
        MARGIN_L + t * self.plot_w
    }

    fn y(&self, v: f64) -> f64 {
        MARGIN_T + (1.0 - v.clamp(0.0, 1.0)) * self.plot_h
    }
}

/// Render one experiment's cells as an SVG panel.
pub fn render_panel_svg(cells: &[CellResult], path: &Path) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("no cells to plot".into()));
    }
    let run_label = &cells[0].run_label;

    let mut epochs: Vec<usize> = cells.iter().map(|c| c.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut fractions: Vec<f64> = cells.iter().map(|c| c.fraction).collect();
    fractions.sort_unstable_by(f64::total_cmp);
    fractions.dedup();

    let scales = Scales {
        log_max: (*epochs.last().unwrap() as f64).log10(),
        plot_w: WIDTH - MARGIN_L - MARGIN_R,
        plot_h: HEIGHT - MARGIN_T - MARGIN_B,
    };
    let baseline = cells[0].null.baseline;

    let mut svg = String::with_capacity(64 * 1024);
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + scales.plot_w / 2.0,
        xml_escape(run_label)
    ));

    draw_axes(&mut svg, &scales, &epochs);

    // Baseline reference.
    svg.push_str(&format!(
        "<line class=\"baseline\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"#444444\" stroke-dasharray=\"5,4\" stroke-width=\"1\"/>\n",
        MARGIN_L,
        scales.y(baseline),
        MARGIN_L + scales.plot_w,
        scales.y(baseline)
    ));

    // Null boxplots, one glyph per cell, dodged per fraction.
    let k = fractions.len();
    for (rank, &fraction) in fractions.iter().enumerate() {
        let color = fraction_color(fraction, rank, k);
        for cell in cells.iter().filter(|c| c.fraction == fraction) {
            let sorted = sorted_copy(&cell.null.scores);
            let cx =
                scales.x(cell.epoch) + (rank as f64 - (k as f64 - 1.0) / 2.0) * (BOX_W + 2.0);
            draw_box(&mut svg, &scales, cx, &sorted, &color);
        }
    }

    // Observed s-validation curves.
    for (rank, &fraction) in fractions.iter().enumerate() {
        let color = fraction_color(fraction, rank, k);
        let points: String = epochs
            .iter()
            .filter_map(|&e| {
                cells
                    .iter()
                    .find(|c| c.epoch == e && c.fraction == fraction)
                    .map(|c| format!("{:.2},{:.2} ", scales.x(e), scales.y(c.null.observed)))
            })
            .collect();
        svg.push_str(&format!(
            "<polyline class=\"observed\" points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>\n",
            points.trim_end()
        ));
    }

    // Validation sanity curve (fraction-independent).
    let val_points: String = epochs
        .iter()
        .filter_map(|&e| {
            cells
                .iter()
                .find(|c| c.epoch == e)
                .map(|c| format!("{:.2},{:.2} ", scales.x(e), scales.y(c.validation_accuracy)))
        })
        .collect();
    svg.push_str(&format!(
        "<polyline class=\"validation\" points=\"{}\" fill=\"none\" stroke=\"#d62728\" \
         stroke-width=\"1.5\"/>\n",
        val_points.trim_end()
    ));

    draw_legend(&mut svg, &fractions);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn draw_box(svg: &mut String, scales: &Scales, cx: f64, sorted: &[f64], color: &str) {
    let y_min = scales.y(sorted[0]);
    let y_max = scales.y(sorted[sorted.len() - 1]);
    let y_q25 = scales.y(quantile(sorted, 0.25));
    let y_med = scales.y(quantile(sorted, 0.5));
    let y_q75 = scales.y(quantile(sorted, 0.75));
    let half = BOX_W / 2.0;
    svg.push_str(&format!(
        "<g class=\"box\" stroke=\"{color}\">\
         <line x1=\"{cx:.2}\" y1=\"{y_min:.2}\" x2=\"{cx:.2}\" y2=\"{y_max:.2}\" stroke-width=\"0.8\"/>\
         <rect x=\"{:.2}\" y=\"{y_q75:.2}\" width=\"{BOX_W}\" height=\"{:.2}\" \
         fill=\"{color}\" fill-opacity=\"0.45\" stroke-width=\"0.8\"/>\
         <line x1=\"{:.2}\" y1=\"{y_med:.2}\" x2=\"{:.2}\" y2=\"{y_med:.2}\" stroke-width=\"1.4\"/>\
         </g>\n",
        cx - half,
        (y_q25 - y_q75).max(0.0),
        cx - half,
        cx + half,
    ));
}

fn draw_axes(svg: &mut String, scales: &Scales, epochs: &[usize]) {
    let x0 = MARGIN_L;
    let x1 = MARGIN_L + scales.plot_w;
    let y0 = MARGIN_T + scales.plot_h;
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{MARGIN_T}\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    // y ticks at 0, 0.25, ..., 1.
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let y = scales.y(v);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{x0}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{v}</text>\n",
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        ));
    }
    // x ticks at powers of ten up to the final epoch.
    let max_epoch = *epochs.last().unwrap();
    let mut tick = 1usize;
    loop {
        let x = scales.x(tick);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{tick}</text>\n",
            y0 + 5.0,
            y0 + 20.0
        ));
        match tick.checked_mul(10) {
            Some(next) if next <= max_epoch => tick = next,
            _ => break,
        }
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">training epoch (log scale)</text>\n",
        MARGIN_L + scales.plot_w / 2.0,
        y0 + 40.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">accuracy</text>\n",
        MARGIN_T + scales.plot_h / 2.0,
        MARGIN_T + scales.plot_h / 2.0
    ));
}

fn draw_legend(svg: &mut String, fractions: &[f64]) {
    let x = WIDTH - MARGIN_R + 16.0;
    let mut y = MARGIN_T + 8.0;
    let k = fractions.len();
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" \
         font-weight=\"bold\">pixel shuffle</text>\n"
    ));
    y += 8.0;
    for (rank, &fraction) in fractions.iter().enumerate() {
        y += 18.0;
        let color = fraction_color(fraction, rank, k);
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{}% \
             (box: null, line: observed)</text>\n",
            y - 10.0,
            x + 18.0,
            y,
            fmt_percent(fraction)
        ));
    }
    y += 18.0;
    svg.push_str(&format!(
        "<line x1=\"{x}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#d62728\" \
         stroke-width=\"1.5\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">validation accuracy</text>\n",
        y - 4.0,
        x + 12.0,
        y - 4.0,
        x + 18.0,
        y
    ));
    y += 18.0;
    svg.push_str(&format!(
        "<line x1=\"{x}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#444444\" \
         stroke-dasharray=\"5,4\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">random-guess baseline</text>\n",
        y - 4.0,
        x + 12.0,
        y - 4.0,
        x + 18.0,
        y
    ));
}

fn fmt_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write the standard report bundle (CSV + JSON + SVG) into a run directory.
pub fn write_report_bundle(cells: &[CellResult], dir: &Path) -> Result<()> {
    write_results_csv(cells, &dir.join("results.csv"))?;
    write_summary_json(cells, &dir.join("summary.json"))?;
    render_panel_svg(cells, &dir.join("figure.svg"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.5), "0.500000");
        assert_eq!(fmt_sig6(1.0), "1.00000");
        assert_eq!(fmt_sig6(0.00990099), "0.00990099");
        assert_eq!(fmt_sig6(0.0), "0.000000");
        assert_eq!(fmt_sig6(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_sig6(0.05), "0.0500000");
    }

    #[test]
    fn csv_field_escaping() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
