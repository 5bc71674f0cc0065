//! Minimal standalone SVG line charts with linear or log-log axes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values below this are drawn at the floor on log axes.
pub const LOG_FLOOR: f64 = 1e-5;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 160.0, 40.0, 60.0); // left right top bottom

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    #[default]
    Linear,
    LogLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub scale: AxisScale,
    pub series: Vec<Series>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.max(LOG_FLOOR).log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi, log }
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.max(LOG_FLOOR).log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            (0..=5)
                .map(|k| {
                    let v = self.lo + (self.hi - self.lo) * k as f64 / 5.0;
                    (v, format!("{}", (v * 1000.0).round() / 1000.0))
                })
                .collect()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Render to SVG text. Every series needs at least two finite points.
pub fn render_svg(spec: &PlotSpec) -> Result<String> {
    if spec.series.is_empty() {
        return Err(Error::Input("plot has no series".into()));
    }
    for s in &spec.series {
        if s.points.len() < 2 {
            return Err(Error::Input(format!("series '{}' needs at least two points", s.label)));
        }
        if s.points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::Input(format!("series '{}' has non-finite points", s.label)));
        }
    }
    let log = spec.scale == AxisScale::LogLog;
    let all = || spec.series.iter().flat_map(|s| s.points.iter());
    let xa = Axis::fit(all().map(|p| p.0), log);
    let ya = Axis::fit(all().map(|p| p.1), log);
    let (l, r, t, b) = MARGIN;
    let (pw, ph) = (WIDTH - l - r, HEIGHT - t - b);
    let px = |v: f64| l + xa.unit(v) * pw;
    let py = |v: f64| t + (1.0 - ya.unit(v)) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(o, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(o, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>", l + pw / 2.0, escape(&spec.title));
    let _ = writeln!(o, "<rect x=\"{l}\" y=\"{t}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>");
    for (v, label) in xa.ticks() {
        let x = px(v);
        let _ = writeln!(o, "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#333\"/>", t + ph, t + ph + 5.0);
        let _ = writeln!(o, "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", t + ph + 18.0, escape(&label));
    }
    for (v, label) in ya.ticks() {
        let y = py(v);
        let _ = writeln!(o, "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{l}\" y2=\"{y:.2}\" stroke=\"#333\"/>", l - 5.0);
        let _ = writeln!(o, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", l - 8.0, y + 4.0, escape(&label));
    }
    let _ = writeln!(o, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", l + pw / 2.0, HEIGHT - 15.0, escape(&spec.x_label));
    let _ = writeln!(
        o,
        "<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>",
        t + ph / 2.0,
        escape(&spec.y_label)
    );
    for (k, s) in spec.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(o, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let ly = t + 10.0 + 20.0 * k as f64;
        let lx = l + pw + 15.0;
        let _ = writeln!(o, "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>", lx + 20.0);
        let _ = writeln!(o, "<text x=\"{}\" y=\"{}\">{}</text>", lx + 26.0, ly + 4.0, escape(&s.label));
    }
    o.push_str("</svg>\n");
    Ok(o)
}

/// Render and write to `path`.
pub fn emit_plot(spec: &PlotSpec, path: &Path) -> Result<()> {
    let svg = render_svg(spec)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
