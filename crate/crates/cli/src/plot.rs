//! Scatter-grid SVG rendering.
//!
//! All panels share one coordinate frame computed from the union of the
//! inputs (plus a 5% margin), so side-by-side panels are directly
//! comparable. Output is plain hand-built SVG: deterministic bytes, no
//! renderer dependency.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use sdmc_core::{Error, Result};

const CELL: f64 = 300.0;
const PAD: f64 = 24.0;
const LABEL_H: f64 = 22.0;
const MARKER_R: f64 = 2.0;

/// One panel: a caption and its points.
pub struct Panel {
    pub label: String,
    pub points: Array2<f64>,
}

fn shared_frame(panels: &[Panel]) -> (f64, f64, f64) {
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in panels {
        for row in p.points.rows() {
            lo_x = lo_x.min(row[0]);
            hi_x = hi_x.max(row[0]);
            lo_y = lo_y.min(row[1]);
            hi_y = hi_y.max(row[1]);
        }
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let margin = 0.05 * span;
    let side = span + 2.0 * margin;
    // Center the square frame on the data.
    let cx = (lo_x + hi_x) / 2.0;
    let cy = (lo_y + hi_y) / 2.0;
    (cx - side / 2.0, cy - side / 2.0, side)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Render panels into an SVG grid with `cols` panels per row.
pub fn render_grid(panels: &[Panel], cols: usize) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    if cols == 0 {
        return Err(Error::Argument("cols must be at least 1".into()));
    }
    if panels.iter().any(|p| p.points.ncols() != 2) {
        return Err(Error::Argument("plots need 2-column point sets".into()));
    }
    let cols = cols.min(panels.len());
    let rows = panels.len().div_ceil(cols);
    let width = PAD + cols as f64 * (CELL + PAD);
    let height = PAD + rows as f64 * (CELL + LABEL_H + PAD);
    let (fx, fy, side) = shared_frame(panels);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" \
         font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
    );
    for (i, panel) in panels.iter().enumerate() {
        let col = i % cols;
        let row = i / cols;
        let x0 = PAD + col as f64 * (CELL + PAD);
        let y0 = PAD + row as f64 * (CELL + LABEL_H + PAD);
        let _ = write!(
            svg,
            "<g>\n<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n\
             <rect x=\"{x0:.1}\" y=\"{:.1}\" width=\"{CELL:.0}\" height=\"{CELL:.0}\" \
             fill=\"#fafafa\" stroke=\"#888888\" stroke-width=\"1\"/>\n",
            x0 + CELL / 2.0,
            y0 + LABEL_H - 7.0,
            xml_escape(&panel.label),
            y0 + LABEL_H,
        );
        let plot_y0 = y0 + LABEL_H;
        for p in panel.points.rows() {
            let px = x0 + (p[0] - fx) / side * CELL;
            // SVG y grows downward.
            let py = plot_y0 + CELL - (p[1] - fy) / side * CELL;
            let _ = write!(
                svg,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"{MARKER_R}\" \
                 fill=\"#2166ac\" fill-opacity=\"0.55\"/>\n"
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
