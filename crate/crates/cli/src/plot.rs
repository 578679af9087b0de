//! Self-contained SVG figures: sample scatters over density contours, and
//! solver paths.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};
use segcd::{Cond, GmmSpec, NoiseSchedule};

pub const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Square data-space window mapped onto the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: (f64, f64),
    pub half_width: f64,
}

impl Frame {
    /// Covers every mode out to four standard deviations.
    pub fn for_spec(spec: &GmmSpec) -> Self {
        let reach = (0..spec.num_components())
            .map(|i| {
                let m = spec.mean(i);
                m[0].abs().max(m.get(1).copied().unwrap_or(0.0).abs()) + 4.0 * spec.stds[i]
            })
            .fold(1.0, f64::max);
        Self { center: (0.0, 0.0), half_width: reach }
    }

    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        let scale = (SIZE - 2.0 * MARGIN) / (2.0 * self.half_width);
        (
            MARGIN + (x - self.center.0 + self.half_width) * scale,
            SIZE - MARGIN - (y - self.center.1 + self.half_width) * scale,
        )
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center.0).abs() <= self.half_width && (y - self.center.1).abs() <= self.half_width
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="#999" stroke-width="1"/>"##,
        w = SIZE - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{x}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        escape(title),
        x = SIZE / 2.0
    );
}

/// Line segments of the `level` iso-line of `field` (marching squares on a
/// regular grid spanning `frame`). `field[[i, j]]` is sampled at column `i`
/// (x) and row `j` (y).
pub fn iso_segments(field: &Array2<f64>, frame: &Frame, level: f64) -> Vec<[(f64, f64); 2]> {
    let (nx, ny) = field.dim();
    let coord = |i: usize, n: usize, c: f64| c - frame.half_width + 2.0 * frame.half_width * i as f64 / (n - 1) as f64;
    let mut segs = Vec::new();
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            // Corners counter-clockwise from bottom-left.
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v: Vec<f64> = corners.iter().map(|&(a, b)| field[[a, b]]).collect();
            let p: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(a, b)| (coord(a, nx, frame.center.0), coord(b, ny, frame.center.1)))
                .collect();
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] >= level) != (v[b] >= level) {
                    let w = (level - v[a]) / (v[b] - v[a]);
                    crossings.push((p[a].0 + w * (p[b].0 - p[a].0), p[a].1 + w * (p[b].1 - p[a].1)));
                }
            }
            match crossings.len() {
                2 => segs.push([crossings[0], crossings[1]]),
                // Saddle: pair edges by the cell-centre value.
                4 => {
                    let centre = v.iter().sum::<f64>() / 4.0;
                    if (centre >= level) == (v[0] >= level) {
                        segs.push([crossings[0], crossings[3]]);
                        segs.push([crossings[1], crossings[2]]);
                    } else {
                        segs.push([crossings[0], crossings[1]]);
                        segs.push([crossings[2], crossings[3]]);
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

/// Clean-data log density of the unconditional mixture on a `res × res` grid.
pub fn log_density_grid(spec: &GmmSpec, schedule: &NoiseSchedule, frame: &Frame, res: usize) -> Array2<f64> {
    let res = res.max(2);
    Array2::from_shape_fn((res, res), |(i, j)| {
        let x = frame.center.0 - frame.half_width + 2.0 * frame.half_width * i as f64 / (res - 1) as f64;
        let y = frame.center.1 - frame.half_width + 2.0 * frame.half_width * j as f64 / (res - 1) as f64;
        spec.log_density(schedule, Array1::from(vec![x, y]).view(), 0, None).unwrap_or(f64::NEG_INFINITY)
    })
}

fn contours(out: &mut String, spec: &GmmSpec, schedule: &NoiseSchedule, frame: &Frame) {
    let field = log_density_grid(spec, schedule, frame, 161);
    let peak = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Levels one, two and three "standard deviations" below the peak.
    for (k, shade) in [(0.5, "#555"), (2.0, "#888"), (4.5, "#bbb")] {
        let mut d = String::new();
        for [a, b] in iso_segments(&field, frame, peak - k) {
            let (ax, ay) = frame.to_canvas(a.0, a.1);
            let (bx, by) = frame.to_canvas(b.0, b.1);
            let _ = write!(d, "M{ax:.1},{ay:.1}L{bx:.1},{by:.1}");
        }
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{shade}" stroke-width="1"/>"#);
        }
    }
}

fn colour(c: Option<&Cond>) -> &'static str {
    match c.copied().flatten() {
        Some(k) => PALETTE[k % PALETTE.len()],
        None => "#333333",
    }
}

/// Samples (one row per point) drawn over the data-density contours,
/// coloured by condition.
pub fn scatter_svg(title: &str, spec: &GmmSpec, schedule: &NoiseSchedule, samples: ArrayView2<f64>, cond: &[Cond]) -> String {
    let frame = Frame::for_spec(spec);
    let mut out = String::new();
    header(&mut out, title);
    contours(&mut out, spec, schedule, &frame);
    let _ = writeln!(out, r#"<g fill-opacity="0.55">"#);
    for (b, row) in samples.rows().into_iter().enumerate() {
        let (x, y) = (row[0], row.get(1).copied().unwrap_or(0.0));
        if !(x.is_finite() && y.is_finite() && frame.contains(x, y)) {
            continue;
        }
        let (cx, cy) = frame.to_canvas(x, y);
        let _ = writeln!(out, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="2" fill="{}"/>"#, colour(cond.get(b)));
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Solver paths: `states[k]` holds every path's position after step `k`.
/// At most `max_paths` paths are drawn; each ends in a dot.
pub fn trajectory_svg(
    title: &str,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    states: &[Array2<f64>],
    cond: &[Cond],
    max_paths: usize,
) -> String {
    let frame = Frame::for_spec(spec);
    let mut out = String::new();
    header(&mut out, title);
    contours(&mut out, spec, schedule, &frame);
    let paths = states.first().map_or(0, |s| s.nrows()).min(max_paths);
    let clamp = |v: f64| v.clamp(-1.5 * frame.half_width, 1.5 * frame.half_width);
    for b in 0..paths {
        let points: Vec<String> = states
            .iter()
            .filter(|s| s[[b, 0]].is_finite() && s[[b, 1]].is_finite())
            .map(|s| {
                let (x, y) = frame.to_canvas(clamp(s[[b, 0]]), clamp(s[[b, 1]]));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let Some(last) = points.last() else { continue };
        let c = colour(cond.get(b));
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="0.8" stroke-opacity="0.6"/>"#,
            points.join(" ")
        );
        let (x, y) = last.split_once(',').expect("formatted pair");
        let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{c}"/>"#);
    }
    out.push_str("</svg>\n");
    out
}
