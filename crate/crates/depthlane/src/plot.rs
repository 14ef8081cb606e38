//! SVG figures of predicted and ground-truth lanes: a top-down BEV panel and
//! an oblique 3D panel with exaggerated height.

use std::fmt::Write;

use depthlane_core::{BevGridSpec, LaneInstance, Point3};

const PANEL: f64 = 360.0;
const MARGIN: f64 = 30.0;
/// Vertical exaggeration of `z` in the 3D panel.
const Z_GAIN: f64 = 8.0;

struct Frame {
    x0: f64,
    scale: f64,
    cx: f64,
    cy: f64,
}

impl Frame {
    fn fit(points: &[(f64, f64)], x0: f64) -> Self {
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(u, v) in points {
            lo_u = lo_u.min(u);
            hi_u = hi_u.max(u);
            lo_v = lo_v.min(v);
            hi_v = hi_v.max(v);
        }
        if lo_u > hi_u {
            (lo_u, hi_u, lo_v, hi_v) = (-1.0, 1.0, -1.0, 1.0);
        }
        let span = (hi_u - lo_u).max(hi_v - lo_v).max(1e-9);
        Self {
            x0,
            scale: (PANEL - 2.0 * MARGIN) / span,
            cx: 0.5 * (lo_u + hi_u),
            cy: 0.5 * (lo_v + hi_v),
        }
    }

    fn map(&self, (u, v): (f64, f64)) -> (f64, f64) {
        (
            self.x0 + PANEL / 2.0 + (u - self.cx) * self.scale,
            PANEL / 2.0 - (v - self.cy) * self.scale,
        )
    }
}

fn bev(p: &Point3) -> (f64, f64) {
    (p.x, p.y)
}

fn oblique(p: &Point3) -> (f64, f64) {
    (p.x + 0.35 * p.y, 0.45 * p.y + Z_GAIN * p.z)
}

fn polyline(out: &mut String, frame: &Frame, lane: &[Point3], proj: fn(&Point3) -> (f64, f64), style: &str) {
    if lane.len() < 2 {
        return;
    }
    let pts: Vec<String> = lane
        .iter()
        .map(|p| {
            let (x, y) = frame.map(proj(p));
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, pts.join(" "));
}

const GT_STYLE: &str = r##"stroke="#2a9d3a" stroke-width="3" stroke-opacity="0.6""##;
const PRED_STYLE: &str = r##"stroke="#d62828" stroke-width="1.5" stroke-dasharray="5,3""##;

/// Side-by-side BEV and 3D views. `grid` outlines the BEV extent.
pub fn render(pred: &[LaneInstance], gt: &[Vec<Point3>], grid: &BevGridSpec, title: &str) -> String {
    let corners = [
        Point3::new(grid.x_min, grid.y_min, 0.0),
        Point3::new(grid.x_max, grid.y_min, 0.0),
        Point3::new(grid.x_max, grid.y_max, 0.0),
        Point3::new(grid.x_min, grid.y_max, 0.0),
    ];
    let all: Vec<Point3> = gt
        .iter()
        .flatten()
        .chain(pred.iter().flat_map(|l| &l.points))
        .chain(&corners)
        .copied()
        .collect();
    let left = Frame::fit(&all.iter().map(bev).collect::<Vec<_>>(), 0.0);
    let right = Frame::fit(&all.iter().map(oblique).collect::<Vec<_>>(), PANEL);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = 2.0 * PANEL,
        h = PANEL + 20.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (frame, proj) in [(&left, bev as fn(&Point3) -> (f64, f64)), (&right, oblique)] {
        let outline: Vec<Point3> = corners.iter().chain(&corners[..1]).copied().collect();
        polyline(&mut s, frame, &outline, proj, r##"stroke="#999" stroke-width="1""##);
        for lane in gt {
            polyline(&mut s, frame, lane, proj, GT_STYLE);
        }
        for lane in pred {
            polyline(&mut s, frame, &lane.points, proj, PRED_STYLE);
        }
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="16">BEV (x right, y forward)</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16">3D (z x{Z_GAIN})</text>"#, PANEL + MARGIN);
    let _ = writeln!(
        s,
        r##"<text x="{MARGIN}" y="{}"><tspan fill="#2a9d3a">ground truth</tspan>  <tspan fill="#d62828">prediction</tspan>  {}</text>"##,
        PANEL + 12.0,
        escape(title)
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
