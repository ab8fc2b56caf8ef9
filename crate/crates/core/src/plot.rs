//! Static SVG line chart of a constraint sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::Tsv;
use crate::pipeline::SweepResult;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn nice(v: f64) -> String {
    format!("{v:.4}")
}

/// SVG document plotting error against `m`, with the minimum marked.
pub fn sweep_svg(sweep: &SweepResult) -> Result<String> {
    if sweep.rows.len() < 2 {
        return Err(Error::invalid(format!(
            "a sweep plot needs at least 2 rows, got {}",
            sweep.rows.len()
        )));
    }
    let xs: Vec<f64> = sweep.rows.iter().map(|r| r.m).collect();
    let ys: Vec<f64> = sweep.rows.iter().map(|r| r.error).collect();
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) / span(x0, x1) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / span(y0, y1) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    );
    for (value, label_x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            svg,
            r#"<text x="{label_x}" y="{}" text-anchor="middle">{}</text>"#,
            bottom + 18.0,
            nice(value)
        );
    }
    for (value, label_y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{label_y}" text-anchor="end">{}</text>"#,
            left - 6.0,
            nice(value)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">m</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">cumulative predictive error</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let points: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    let best = &sweep.rows[sweep.argmin()];
    let (bx, by) = (px(best.m), py(best.error));
    let _ = writeln!(svg, r#"<circle cx="{bx:.2}" cy="{by:.2}" r="5" fill="firebrick"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{bx:.2}" y="{:.2}" text-anchor="middle" fill="firebrick">min: m = {}, error = {}</text>"#,
        (by - 12.0).max(14.0),
        nice(best.m),
        nice(best.error)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Path of the TSV written next to a plot.
pub fn companion_tsv(path: &Path) -> PathBuf {
    path.with_extension("tsv")
}

/// Writes the SVG at `path` and an `m, error` TSV beside it.
pub fn emit_plot(sweep: &SweepResult, path: &Path) -> Result<()> {
    let svg = sweep_svg(sweep)?;
    let mut tsv = Tsv::new(&["m", "error"]);
    for r in &sweep.rows {
        tsv.push_floats(&[r.m, r.error]);
    }
    fs::write(path, svg).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    tsv.write(&companion_tsv(path))
}
