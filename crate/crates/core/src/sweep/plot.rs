use std::fmt::Write as _;
use std::path::Path;

use super::report::SweepReport;
use crate::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Padded axis range; a degenerate range is widened around its value.
fn axis_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG scatter of `y_column` against `x_column`, one marker per
/// run with both values, colored by grid point.
pub fn emit_scatter(report: &SweepReport, x_column: &str, y_column: &str, path: impl AsRef<Path>) -> Result<()> {
    let xs = report.column_values(x_column)?;
    let ys = report.column_values(y_column)?;
    let points = report.grid_points();
    let marks: Vec<(f64, f64, usize)> = report
        .rows
        .iter()
        .zip(xs.iter().zip(&ys))
        .filter_map(|(row, (x, y))| {
            let group = points.iter().position(|p| *p == row.point).expect("row's own point");
            Some(((*x)?, (*y)?, group))
        })
        .collect();
    if marks.is_empty() {
        return Err(Error::invalid(format!(
            "no rows with both `{x_column}` and `{y_column}` to plot"
        )));
    }

    let (x0, x1) = axis_range(marks.iter().map(|m| m.0));
    let (y0, y1) = axis_range(marks.iter().map(|m| m.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{x0:e}" data-x-max="{x1:e}" data-y-min="{y0:e}" data-y-max="{y1:e}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    let _ = writeln!(svg, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3e}</text>"#,
            sx(xv),
            TOP + ph + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3e}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(x_column)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_column)
    );

    let _ = writeln!(svg, r#"<g class="markers">"#);
    for (x, y, g) in &marks {
        let _ = writeln!(
            svg,
            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="{}" fill-opacity="0.8"/>"#,
            sx(*x),
            sy(*y),
            PALETTE[g % PALETTE.len()]
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="11">"#);
    for (i, p) in points.iter().enumerate() {
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 20.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{}" y="{:.1}">eta={} batch={} iters={}</text>"#,
            ly - 9.0,
            PALETTE[i % PALETTE.len()],
            lx + 16.0,
            ly,
            p.eta,
            p.batch,
            p.iters
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");

    let path = path.as_ref();
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
