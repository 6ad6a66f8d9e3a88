//! Minimal self-contained SVG line plots for evaluation curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Writes a single-series line plot. Axis ranges cover the data, expanded to
/// include the unit box when the data fits inside it (PR and recall curves
/// read better on fixed axes).
pub fn line_plot(
    points: &[(f64, f64)],
    title: &str,
    x_label: &str,
    y_label: &str,
    path: &Path,
) -> Result<()> {
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    // Axes.
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        px(x0), py(y0), px(x1), py(y0)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        px(x0), py(y0), px(x0), py(y1)
    );
    // Ticks and grid at quarters.
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (gx, gy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd" stroke-width="0.5"/>"#,
            px(gx), py(y0), px(gx), py(y1)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd" stroke-width="0.5"/>"#,
            px(x0), py(gy), px(x1), py(gy)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif">{:.2}</text>"#,
            px(gx), py(y0) + 16.0, gx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{:.2}</text>"#,
            px(x0) - 6.0, py(gy) + 4.0, gy
        );
    }
    // Series.
    if !points.is_empty() {
        let mut d = String::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            let _ = write!(d, "{}{},{} ", if i == 0 { "M" } else { "L" }, px(x), py(y));
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="#1f6fb2" stroke-width="1.6"/>"#,
            d.trim_end()
        );
    }
    // Labels.
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        title
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        H - 14.0,
        x_label
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        y_label
    );
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_self_contained_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.svg");
        let pts: Vec<(f64, f64)> = (0..=10).map(|i| (i as f64 / 10.0, (i as f64 / 10.0).powi(2))).collect();
        line_plot(&pts, "test", "x", "y", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.ends_with("</svg>\n"));
        assert!(!text.contains("http://") || text.contains("xmlns"), "no external asset refs");
        assert!(text.contains("<path"));
    }

    #[test]
    fn empty_series_still_renders_axes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svg");
        line_plot(&[], "empty", "x", "y", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("<line"));
        assert!(!text.contains("<path"));
    }
}
