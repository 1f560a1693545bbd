//! Static SVG renderings: line charts, histograms, heatmaps and skeletons.

use std::fmt::Write;

use crate::metrics::{Histogram, SkeletonSpec};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 20.0, 40.0);
    let _ = writeln!(
        out,
        r##"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 - f * (y0 - y1);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y0 + 16.0,
            tick(x.0 + f * (x.1 - x.0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            tick(y.0 + f * (y.1 - y.0))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 14.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Line chart of named `(x, y)` series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let xr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    axes(&mut out, xr, yr, xlabel, ylabel);
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(k, &(x, y))| {
                let px = project(x, xr, MARGIN, W - 20.0);
                let py = project(y, yr, H - MARGIN, 40.0);
                format!("{}{px:.2} {py:.2}", if k == 0 { "M" } else { "L" })
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            d.join(" ")
        );
        let ly = 48.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}" text-anchor="end">{}</text>"#,
            W - 28.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of histogram counts.
pub fn histogram_chart(title: &str, xlabel: &str, hist: &Histogram) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let xr = range(hist.edges.iter().copied());
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    axes(&mut out, xr, (0.0, max), xlabel, "frames");
    for (i, &c) in hist.counts.iter().enumerate() {
        let (a, b) = (hist.edges[i], hist.edges[i + 1]);
        let x0 = project(a, xr, MARGIN, W - 20.0);
        let x1 = project(b, xr, MARGIN, W - 20.0);
        let y = project(c as f64, (0.0, max), H - MARGIN, 40.0);
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            (x1 - x0).max(0.0),
            (H - MARGIN - y).max(0.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grey-scale heatmap of a row-major `[rows, cols]` matrix with values in
/// `[0, 1]`; darker is larger.
pub fn heatmap(title: &str, rows: usize, cols: usize, values: &[f64], labels: Option<&[String]>) -> String {
    let mut out = String::new();
    let pad = if labels.is_some() { 90.0 } else { 30.0 };
    let cell = ((W - pad - 20.0) / cols.max(1) as f64).min((H - pad - 40.0) / rows.max(1) as f64);
    let (w, h) = (pad + cell * cols as f64 + 20.0, pad + cell * rows as f64 + 40.0);
    open(&mut out, w, h, title);
    for r in 0..rows {
        for c in 0..cols {
            let v = values.get(r * cols + c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let g = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({g},{g},{g})"/>"#,
                pad + c as f64 * cell,
                40.0 + r as f64 * cell
            );
        }
    }
    if let Some(names) = labels {
        for (i, name) in names.iter().enumerate().take(rows) {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
                pad - 4.0,
                40.0 + (i as f64 + 0.7) * cell,
                escape(name)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Front view (x right, y down) of one or more poses sharing a skeleton.
/// Each pose is `joints * 3` coordinates.
pub fn skeleton_view(title: &str, skeleton: &SkeletonSpec, poses: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let xs = poses.iter().flat_map(|p| p.1.chunks(3).map(|c| c[0]));
    let ys = poses.iter().flat_map(|p| p.1.chunks(3).map(|c| c[1]));
    let (xr, yr) = (range(xs), range(ys));
    // equal scale on both axes
    let span = (xr.1 - xr.0).max(yr.1 - yr.0) * 1.1;
    let (cx, cy) = ((xr.0 + xr.1) / 2.0, (yr.0 + yr.1) / 2.0);
    let size = (H - 80.0).min(W - 40.0);
    let map = |x: f64, y: f64| {
        (
            W / 2.0 + (x - cx) / span * size,
            (H + 20.0) / 2.0 + (y - cy) / span * size,
        )
    };
    for (i, (name, coords)) in poses.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for (j, parent) in skeleton.parents.iter().enumerate() {
            if let (Some(p), true) = (parent, coords.len() >= 3 * skeleton.len()) {
                let (x0, y0) = map(coords[3 * p], coords[3 * p + 1]);
                let (x1, y1) = map(coords[3 * j], coords[3 * j + 1]);
                let _ = writeln!(
                    out,
                    r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{colour}" stroke-width="2"/>"#
                );
            }
        }
        for c in coords.chunks(3) {
            let (x, y) = map(c[0], c[1]);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#);
        }
        let _ = writeln!(
            out,
            r#"<text x="20" y="{:.1}" fill="{colour}">{}</text>"#,
            48.0 + 16.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(svg: &str) -> bool {
        svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>")
    }

    #[test]
    fn charts_are_wellformed() {
        let s = line_chart("loss <a&b>", "step", "loss", &[("train".into(), vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(balanced(&s));
        assert!(s.contains("&lt;a&amp;b&gt;"));
        assert_eq!(s.matches("<path").count(), 2);
        // degenerate and empty inputs still render
        assert!(balanced(&line_chart("", "", "", &[("x".into(), vec![(1.0, 1.0)])])));
        assert!(balanced(&line_chart("", "", "", &[])));
    }

    #[test]
    fn histogram_and_heatmap() {
        let h = Histogram::new(&[1.0, 2.0, 12.0], 10.0).unwrap();
        let s = histogram_chart("errors", "mm", &h);
        assert_eq!(s.matches("<rect").count(), 1 + h.counts.len());
        let m = heatmap("attn", 2, 3, &[0.0, 0.5, 1.0, 1.0, 0.5, 0.0], None);
        assert_eq!(m.matches("<rect").count(), 7);
        assert!(m.contains("rgb(0,0,0)") && m.contains("rgb(255,255,255)"));
    }

    #[test]
    fn skeleton_draws_every_bone() {
        let skel = SkeletonSpec::h36m17();
        let pose: Vec<f64> = (0..51).map(|i| i as f64).collect();
        let s = skeleton_view("pose", &skel, &[("gt".into(), pose.clone()), ("pred".into(), pose)]);
        assert_eq!(s.matches("<line").count(), 2 * 16);
        assert_eq!(s.matches("<circle").count(), 2 * 17);
    }
}
