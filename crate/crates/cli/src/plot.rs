//! Minimal SVG charts. The CSV files are authoritative; these are for eyeballing.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (px, py) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(*px), x.1.max(*px));
            y = (y.0.min(*py), y.1.max(*py));
        }
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN.0 + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN.0 - MARGIN.1)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN.3 - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN.2 - MARGIN.3)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11"><rect width="100%" height="100%" fill="white"/><text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN.0, WIDTH - MARGIN.1, MARGIN.2, HEIGHT - MARGIN.3);
    let _ = write!(out, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (vx, vy) = (f.x.0 + t * (f.x.1 - f.x.0), f.y.0 + t * (f.y.1 - f.y.0));
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(vx), y1 + 15.0, tick(vx));
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 5.0, f.py(vy) + 4.0, tick(vy));
    }
    let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = write!(
        out,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = write!(out, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, color(i), path.join(" "));
        if series.len() > 1 {
            let y = MARGIN.2 + 14.0 * (i as f64 + 1.0);
            let _ = write!(out, r#"<text x="{:.1}" y="{y:.1}" fill="{}">{}</text>"#, MARGIN.0 + 8.0, color(i), escape(&s.name));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of cells coloured by the most probable expert, opacity by its
/// probability, with optional labelled sample points on top.
pub struct PartitionMap {
    pub x: (f64, f64),
    pub y: (f64, f64),
    /// `cells[row][col] = (expert, probability)`, row 0 at the bottom.
    pub cells: Vec<Vec<(usize, f64)>>,
    pub points: Vec<(f64, f64, usize)>,
}

pub fn partition_map(title: &str, map: &PartitionMap) -> String {
    let frame = Frame { x: map.x, y: map.y };
    let mut out = String::new();
    open(&mut out, title);
    let rows = map.cells.len().max(1) as f64;
    for (r, row) in map.cells.iter().enumerate() {
        let cols = row.len().max(1) as f64;
        for (c, (expert, p)) in row.iter().enumerate() {
            let (cx0, cx1) = (map.x.0 + (map.x.1 - map.x.0) * c as f64 / cols, map.x.0 + (map.x.1 - map.x.0) * (c + 1) as f64 / cols);
            let (cy0, cy1) = (map.y.0 + (map.y.1 - map.y.0) * r as f64 / rows, map.y.0 + (map.y.1 - map.y.0) * (r + 1) as f64 / rows);
            let _ = write!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}" fill-opacity="{:.2}"/>"#,
                frame.px(cx0),
                frame.py(cy1),
                frame.px(cx1) - frame.px(cx0) + 0.5,
                frame.py(cy0) - frame.py(cy1) + 0.5,
                color(*expert),
                0.15 + 0.6 * p
            );
        }
    }
    for (x, y, label) in &map.points {
        let fill = if *label == 0 { "white" } else { "black" };
        let _ = write!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2" fill="{fill}" stroke="black" stroke-width="0.5"/>"#, frame.px(*x), frame.py(*y));
    }
    axes(&mut out, &frame, "s1", "s2");
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed_and_skips_non_finite() {
        let s = Series { name: "r<1>".into(), points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)] };
        let svg = line_chart("t", "x", "y", &[s]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("NaN"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn flat_series_gets_a_nonzero_range() {
        let s = Series { name: "c".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] };
        assert!(!line_chart("t", "x", "y", &[s]).contains("inf"));
    }
}
