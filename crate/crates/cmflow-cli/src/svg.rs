//! Single-file SVG plots: line charts for trajectories, scatter plots for
//! point clouds. Presentation only — nothing here feeds back into results.

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const W: f64 = 860.0;
const H: f64 = 560.0;
const ML: f64 = 70.0;
const MR: f64 = 150.0;
const MT: f64 = 48.0;
const MB: f64 = 60.0;

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-12 * span {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.2e}")
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_bounds(mut x0: f64, mut x1: f64, mut y0: f64, mut y1: f64) -> Self {
        if x1 - x0 < 1e-300 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-300 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.04 * (y1 - y0);
        Self {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn chart_skeleton(out: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"17\" text-anchor=\"middle\">{title}</text>\n",
        ML + (W - ML - MR) / 2.0
    ));
    // axes
    out.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    for t in nice_ticks(f.x0, f.x1) {
        let x = f.px(t);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
            MT,
            H - MB
        ));
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(f.y0, f.y1) {
        let y = f.py(t);
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ccc\"/>\n",
            W - MR
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{xlabel}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 16.0
    ));
    out.push_str(&format!(
        "<text x=\"20\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20 {})\">{ylabel}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0
    ));
}

/// Multi-series line chart over a common abscissa.
pub fn line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    times: &[f64],
    series: &[(String, Vec<f64>)],
) -> String {
    let x0 = times.first().copied().unwrap_or(0.0);
    let x1 = times.last().copied().unwrap_or(1.0);
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for (_, v) in series {
        for &y in v {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let f = Frame::from_bounds(x0, x1, y0, y1);
    let mut out = String::new();
    chart_skeleton(&mut out, &f, title, xlabel, ylabel);
    for (k, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = times
            .iter()
            .zip(v)
            .map(|(&t, &y)| format!("{:.2},{:.2}", f.px(t), f.py(y)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            pts.join(" ")
        ));
        let ly = MT + 18.0 + 18.0 * k as f64;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.1}\" x2=\"{}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2.5\"/>\n",
            W - MR + 10.0,
            W - MR + 34.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>\n",
            W - MR + 40.0,
            ly + 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot of (x, y) points with an optional reference circle of given
/// radius around the origin.
pub fn scatter(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    points: &[(f64, f64)],
    circle_radius: Option<f64>,
) -> String {
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(r) = circle_radius {
        x0 = x0.min(-r);
        x1 = x1.max(r);
        y0 = y0.min(-r);
        y1 = y1.max(r);
    }
    if points.is_empty() {
        x0 = -1.0;
        x1 = 1.0;
        y0 = -1.0;
        y1 = 1.0;
    }
    let f = Frame::from_bounds(x0, x1, y0, y1);
    let mut out = String::new();
    chart_skeleton(&mut out, &f, title, xlabel, ylabel);
    if let Some(r) = circle_radius {
        let rx = (f.px(r) - f.px(0.0)).abs();
        let ry = (f.py(r) - f.py(0.0)).abs();
        out.push_str(&format!(
            "<ellipse cx=\"{:.1}\" cy=\"{:.1}\" rx=\"{rx:.1}\" ry=\"{ry:.1}\" fill=\"none\" stroke=\"#999\" stroke-dasharray=\"5,4\"/>\n",
            f.px(0.0),
            f.py(0.0)
        ));
    }
    for &(x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.4\" fill=\"#1f77b4\" fill-opacity=\"0.35\"/>\n",
            f.px(x),
            f.py(y)
        ));
    }
    out.push_str("</svg>\n");
    out
}
