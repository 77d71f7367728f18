//! Self-contained SVG scatter plots of detection-score (variance, mean)
//! pairs per test point, colored by row kind. No plotting dependency;
//! the files are written directly with deterministic formatting.

use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::RowKind;
use crate::Result;

/// One plotted point: x = score variance, y = score mean.
#[derive(Debug, Clone, Copy)]
pub struct ScatterPoint {
    pub variance: f64,
    pub mean: f64,
    pub kind: RowKind,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

fn color(kind: RowKind) -> (&'static str, &'static str) {
    match kind {
        RowKind::InDist { correct: true } => ("#1f77b4", "correct"),
        RowKind::InDist { correct: false } => ("#d62728", "incorrect"),
        RowKind::Ood => ("#ff7f0e", "ood"),
        RowKind::Adversarial => ("#9467bd", "adversarial"),
    }
}

/// Writes the scatter plot. Categories that never occur are left out of
/// the legend.
pub fn write_scatter_svg(path: &Path, title: &str, points: &[ScatterPoint]) -> Result<()> {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x_min = x_min.min(p.variance);
        x_max = x_max.max(p.variance);
        y_min = y_min.min(p.mean);
        y_max = y_max.max(p.mean);
    }
    if points.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let x_pad = 0.05 * (x_max - x_min);
    let y_pad = 0.05 * (y_max - y_min);
    x_min -= x_pad;
    x_max += x_pad;
    y_min -= y_pad;
    y_max += y_pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |v: f64| MARGIN_LEFT + (v - x_min) / (x_max - x_min) * plot_w;
    let sy = |v: f64| MARGIN_TOP + plot_h - (v - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        xml_escape(title)
    );

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        MARGIN_LEFT,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        MARGIN_TOP + plot_h
    );
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.4}</text>",
            sx(fx),
            MARGIN_TOP + plot_h + 18.0,
            fx
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>",
            MARGIN_LEFT - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">detection score variance</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">detection score mean</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for p in points {
        let (fill, _) = color(p.kind);
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            sx(p.variance),
            sy(p.mean),
            fill
        );
    }

    // legend: only categories present, in fixed order
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for kind in [
        RowKind::InDist { correct: true },
        RowKind::InDist { correct: false },
        RowKind::Ood,
        RowKind::Adversarial,
    ] {
        if points.iter().any(|p| p.kind == kind) {
            seen.push(color(kind));
        }
    }
    for (i, (fill, label)) in seen.iter().enumerate() {
        let y = MARGIN_TOP + 14.0 + i as f64 * 20.0;
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{}\"/>",
            WIDTH - MARGIN_RIGHT + 18.0,
            y,
            fill
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            WIDTH - MARGIN_RIGHT + 30.0,
            y + 4.0,
            label
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
