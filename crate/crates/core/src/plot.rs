//! Figures without an image library: SVG line and scatter plots, binary PPM
//! image grids. Output depends only on the input values.

use std::fmt::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::Shape3;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// A numeric table read from CSV. A first line that does not parse as numbers
/// is taken as the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header = vec![];
    let mut rows: Vec<Vec<f64>> = vec![];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Malformed(format!("CSV: {e}")))?;
        let nums: Option<Vec<f64>> = rec.iter().map(|c| c.parse().ok()).collect();
        match nums {
            None if i == 0 => header = rec.iter().map(str::to_string).collect(),
            None => return Err(Error::Malformed(format!("CSV line {}: non-numeric field", i + 1))),
            Some(r) => {
                let width = rows.first().map(Vec::len).or((!header.is_empty()).then_some(header.len()));
                if let Some(w) = width.filter(|&w| w != r.len()) {
                    return Err(Error::Malformed(format!("CSV line {}: {} fields, expected {w}", i + 1, r.len())));
                }
                rows.push(r);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Malformed("CSV has no data rows".into()));
    }
    Ok(Table { header, rows })
}

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            lo = [lo[0].min(x), lo[1].min(y)];
            hi = [hi[0].max(x), hi[1].max(y)];
        }
        for d in 0..2 {
            if !lo[d].is_finite() {
                (lo[d], hi[d]) = (0.0, 1.0);
            }
            if hi[d] - lo[d] < 1e-12 {
                lo[d] -= 0.5;
                hi[d] += 0.5;
            }
        }
        Self { lo, hi }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = MARGIN + (x - self.lo[0]) / (self.hi[0] - self.lo[0]) * (W - 2.0 * MARGIN);
        let v = H - MARGIN - (y - self.lo[1]) / (self.hi[1] - self.lo[1]) * (H - 2.0 * MARGIN);
        (u, v)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, y0) = (MARGIN, H - MARGIN);
    let _ = writeln!(out, r##"<g stroke="#333333" stroke-width="1"><line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}"/></g>"##, W - MARGIN);
    let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{x0}" y="{}" text-anchor="start">{:.3}</text>"#, y0 + 16.0, f.lo[0]);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, W - MARGIN, y0 + 16.0, f.hi[0]);
    let _ = writeln!(out, r#"<text x="{}" y="{y0}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, f.lo[1]);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, MARGIN + 4.0, f.hi[1]);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(out, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, H / 2.0, H / 2.0, escape(ylabel));
    let _ = writeln!(out, "</g>");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot; each series is `(label, points)`.
pub fn svg_curves(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    if series.iter().all(|(_, p)| p.is_empty()) {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &f, xlabel, ylabel);
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (u, v) = f.px(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#, W - MARGIN - 120.0, MARGIN + 14.0 * k as f64, escape(label));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Line plot of one metrics column against the first column.
pub fn svg_metrics(table: &Table, column: &str) -> Result<String> {
    let k = table
        .header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Malformed(format!("CSV has no column '{column}'")))?;
    let pts = table.rows.iter().map(|r| (r[0], r[k])).collect();
    let xlabel = table.header.first().map_or("x", String::as_str);
    svg_curves(column, xlabel, column, &[(column.to_string(), pts)])
}

/// Scatter of the first two columns; `groups` (optional) colours points.
pub fn svg_scatter(title: &str, points: &Tensor, groups: Option<&[usize]>) -> Result<String> {
    if points.rank() != 2 || points.cols() < 2 {
        return Err(Error::InvalidArgument("scatter needs at least two columns".into()));
    }
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let f = Frame::fit((0..points.rows()).map(|i| (points.at(i, 0), points.at(i, 1))));
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &f, "x1", "x2");
    out.push_str("<g fill-opacity=\"0.5\">\n");
    for i in 0..points.rows() {
        let (x, y) = (points.at(i, 0), points.at(i, 1));
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let (u, v) = f.px(x, y);
        let color = PALETTE[groups.map_or(0, |g| g[i]) % PALETTE.len()];
        let _ = writeln!(out, r#"<circle cx="{u:.2}" cy="{v:.2}" r="1.5" fill="{color}"/>"#);
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// One panel per spin configuration, side by side, on shared axes. Each panel
/// is a `<g class="column">` element.
pub fn svg_columns(title: &str, columns: &[(String, Tensor)]) -> Result<String> {
    if columns.is_empty() {
        return Err(Error::InvalidArgument("no columns to plot".into()));
    }
    if columns.iter().any(|(_, t)| t.rank() != 2 || t.cols() < 2) {
        return Err(Error::InvalidArgument("column plots need 2-D points".into()));
    }
    let f = Frame::fit(columns.iter().flat_map(|(_, t)| (0..t.rows()).map(move |i| (t.at(i, 0), t.at(i, 1)))));
    let panel = 200.0;
    let width = panel * columns.len() as f64;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" viewBox="0 0 {width} {}">"#, panel + 40.0, panel + 40.0);
    let _ = writeln!(out, r##"<rect width="{width}" height="{}" fill="#ffffff"/>"##, panel + 40.0);
    let _ = writeln!(out, r#"<text x="{}" y="16" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#, width / 2.0, escape(title));
    for (c, (label, t)) in columns.iter().enumerate() {
        let x0 = panel * c as f64;
        let color = PALETTE[c % PALETTE.len()];
        let _ = writeln!(out, r#"<g class="column" data-spins="{}">"#, escape(label));
        let _ = writeln!(out, r##"<rect x="{}" y="24" width="{}" height="{}" fill="none" stroke="#999999"/>"##, x0 + 4.0, panel - 8.0, panel - 8.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, x0 + panel / 2.0, panel + 34.0, escape(label));
        for i in 0..t.rows() {
            let (x, y) = (t.at(i, 0), t.at(i, 1));
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            let u = x0 + 8.0 + (x - f.lo[0]) / (f.hi[0] - f.lo[0]) * (panel - 16.0);
            let v = 24.0 + panel - 12.0 - (y - f.lo[1]) / (f.hi[1] - f.lo[1]) * (panel - 16.0);
            let _ = writeln!(out, r#"<circle cx="{u:.2}" cy="{v:.2}" r="1.2" fill="{color}"/>"#);
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Binary PPM (P6) of images laid out in a grid with `cols` columns and a
/// one-pixel gap. `images` is `N×(H·W·C)` in `0..=255`; one channel is drawn
/// grey, three as RGB, otherwise the first channel.
pub fn ppm_grid(images: &Tensor, shape: Shape3, cols: usize) -> Result<Vec<u8>> {
    if images.rank() != 2 || images.cols() != shape.len() {
        return Err(Error::InvalidArgument(format!("images {:?} do not match {shape:?}", images.shape())));
    }
    let n = images.rows();
    if n == 0 || cols == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (shape.w + 1) + 1, rows * (shape.h + 1) + 1);
    let mut px = vec![64u8; gw * gh * 3];
    for k in 0..n {
        let (oy, ox) = ((k / cols) * (shape.h + 1) + 1, (k % cols) * (shape.w + 1) + 1);
        let img = images.row(k);
        for i in 0..shape.h {
            for j in 0..shape.w {
                let at = |c: usize| img[(i * shape.w + j) * shape.c + c].round().clamp(0.0, 255.0) as u8;
                let rgb = if shape.c == 3 { [at(0), at(1), at(2)] } else { [at(0); 3] };
                let o = ((oy + i) * gw + ox + j) * 3;
                px[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}
