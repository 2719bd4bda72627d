//! Minimal SVG 1.1 writers for region scatter plots and area bar charts.

use std::fmt::Write;

use ndarray::ArrayView2;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(out: &mut String, title: &str) {
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear map from data range to pixel range.
struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.05).max(1e-9);
        Self { lo: lo - pad, hi: hi + pad, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

fn frame(out: &mut String, xa: &Axis, ya: &Axis, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = xa.lo + t * (xa.hi - xa.lo);
        let yv = ya.lo + t * (ya.hi - ya.lo);
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{xv:.2}</text>",
            xa.map(xv),
            HEIGHT - MARGIN + 16.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{yv:.2}</text>",
            MARGIN - 6.0,
            ya.map(yv) + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{xlabel}</text>",
        WIDTH / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{ylabel}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
}

/// Conditional samples as grey dots and region points in blue. With
/// `rectangle` set, the region rows are box corners and the box is outlined.
pub fn region_scatter(title: &str, samples: ArrayView2<f64>, region: ArrayView2<f64>, rectangle: bool) -> String {
    let xs = samples.column(0).iter().chain(region.column(0).iter()).copied().collect::<Vec<_>>();
    let ys = samples.column(1).iter().chain(region.column(1).iter()).copied().collect::<Vec<_>>();
    let xa = Axis::new(xs.into_iter(), MARGIN, WIDTH - MARGIN);
    let ya = Axis::new(ys.into_iter(), HEIGHT - MARGIN, MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, &xa, &ya, "y1", "y2");
    out.push_str("<g fill=\"#888888\" fill-opacity=\"0.5\">\n");
    for row in samples.rows() {
        let _ = writeln!(out, "<circle class=\"sample\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\"/>", xa.map(row[0]), ya.map(row[1]));
    }
    out.push_str("</g>\n");
    if rectangle && region.nrows() > 0 {
        let (x0, x1) = region.column(0).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (y0, y1) = region.column(1).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = writeln!(
            out,
            "<rect class=\"region\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" fill-opacity=\"0.25\" stroke=\"{}\"/>",
            xa.map(x0),
            ya.map(y1),
            xa.map(x1) - xa.map(x0),
            ya.map(y0) - ya.map(y1),
            PALETTE[0],
            PALETTE[0]
        );
    } else if region.nrows() > 0 {
        let _ = writeln!(out, "<g fill=\"{}\" fill-opacity=\"0.6\">", PALETTE[0]);
        for row in region.rows() {
            let _ = writeln!(out, "<circle class=\"region\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.2\"/>", xa.map(row[0]), ya.map(row[1]));
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per dataset, one bar per method, with a
/// standard-error whisker.
pub fn area_bars(title: &str, groups: &[(String, Vec<(String, f64, f64)>)]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for (_, bars) in groups {
        for (m, _, _) in bars {
            if !methods.contains(&m.as_str()) {
                methods.push(m);
            }
        }
    }
    let top = groups
        .iter()
        .flat_map(|(_, b)| b.iter().map(|(_, v, se)| v + se))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let ya = Axis { lo: 0.0, hi: top * 1.1, from: HEIGHT - MARGIN, to: MARGIN };
    let xa = Axis { lo: 0.0, hi: groups.len().max(1) as f64, from: MARGIN, to: WIDTH - MARGIN };
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, &xa, &ya, "", "area");
    let slot = (xa.map(1.0) - xa.map(0.0)) * 0.8 / methods.len().max(1) as f64;
    for (g, (name, bars)) in groups.iter().enumerate() {
        let left = xa.map(g as f64) + (xa.map(1.0) - xa.map(0.0)) * 0.1;
        for (method, value, se) in bars {
            let k = methods.iter().position(|m| m == method).expect("collected");
            let x = left + k as f64 * slot;
            let _ = writeln!(
                out,
                "<rect class=\"bar\" data-method=\"{}\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                escape(method),
                ya.map(*value),
                slot * 0.9,
                ya.map(0.0) - ya.map(*value),
                PALETTE[k % PALETTE.len()]
            );
            let cx = x + slot * 0.45;
            let _ = writeln!(
                out,
                "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                ya.map(value - se),
                ya.map(value + se)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            xa.map(g as f64 + 0.5),
            HEIGHT - MARGIN + 30.0,
            escape(name)
        );
    }
    for (k, m) in methods.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN - 90.0,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            WIDTH - MARGIN - 75.0,
            y,
            escape(m)
        );
    }
    out.push_str("</svg>\n");
    out
}
