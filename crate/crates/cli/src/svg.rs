//! Minimal hand-rolled SVG output: polyline charts and grid heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// Polyline chart over (x, y) points, drawn in data order.
pub fn polyline_chart(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> String {
    let (x_min, x_max) = span(points.iter().map(|p| p.0));
    let (y_min, y_max) = span(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min).max(1e-12) * (H - 2.0 * MARGIN);

    let mut coords = String::new();
    for (x, y) in points {
        let _ = write!(coords, "{:.2},{:.2} ", sx(*x), sy(*y));
    }

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(
        svg,
        r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let _ = write!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 16.0,
        xml_escape(x_label)
    );
    let _ = write!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    let _ = write!(
        svg,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        coords.trim_end()
    );
    for (x, y) in points {
        let _ = write!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#1f77b4"/>"##,
            sx(*x),
            sy(*y)
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Grid heatmap shaded by importance, with kept cells outlined and planted
/// cells marked.
pub fn heatmap(matrix: &[Vec<f64>], kept: &[usize], planted: &[usize], title: &str) -> String {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, |r| r.len());
    let lo = matrix.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = matrix.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cell = ((W - 2.0 * MARGIN) / cols.max(1) as f64).min((H - 2.0 * MARGIN) / rows.max(1) as f64);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(
        svg,
        r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    for (r, row) in matrix.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let shade = (255.0 - norm * 190.0) as u8;
            let x = MARGIN + c as f64 * cell;
            let y = MARGIN + r as f64 * cell;
            let idx = r * cols + c;
            let kept_here = kept.contains(&idx);
            let stroke = if kept_here { "#d62728" } else { "#999999" };
            let width = if kept_here { 3.0 } else { 0.5 };
            let _ = write!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},255)" stroke="{stroke}" stroke-width="{width}"/>"#
            );
            if planted.contains(&idx) {
                let _ = write!(
                    svg,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="#2ca02c" stroke-width="2"/>"##,
                    x + cell / 2.0,
                    y + cell / 2.0,
                    cell * 0.3
                );
            }
        }
    }
    svg.push_str("</svg>");
    svg
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyline_has_one_vertex_per_point() {
        let svg = polyline_chart(&[(1.0, 0.5), (2.0, 0.7), (3.0, 0.9)], "t", "x", "y");
        let points_attr = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points_attr.split_whitespace().count(), 3);
    }

    #[test]
    fn heatmap_outlines_kept_cells() {
        let m = vec![vec![0.1, 0.9], vec![0.2, 0.3]];
        let svg = heatmap(&m, &[1], &[1], "h");
        assert!(svg.contains("#d62728"));
        assert!(svg.contains("#2ca02c"));
        assert_eq!(svg.matches("<rect").count(), 5, "backdrop + 4 cells");
    }
}
