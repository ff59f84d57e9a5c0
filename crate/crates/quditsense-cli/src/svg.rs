//! Minimal deterministic SVG line charts for the optional plot outputs.
//!
//! Charts are self-contained (no scripts, no external references) and are
//! rendered from the already-computed result tables; nothing downstream
//! ever reads them back.

/// One polyline with a legend label.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 86.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 64.0;
const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn fmt(x: f64) -> String {
    // Short round-trip form keeps the file stable across runs.
    format!("{x:?}")
}

fn fmt_px(x: f64) -> String {
    format!("{:.2}", x)
}

/// Tick label: plain decimal in a friendly range, scientific otherwise.
fn fmt_tick(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let a = x.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{x}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{x:e}")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() && (!log || v > 0.0) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            lo = if log { 1.0 } else { 0.0 };
            hi = if log { 10.0 } else { 1.0 };
        }
        if lo == hi {
            if log {
                lo /= 2.0;
                hi *= 2.0;
            } else {
                let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
                lo -= pad;
                hi += pad;
            }
        } else if !log {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        Axis { lo, hi, log }
    }

    /// Map a data value to [0, 1] along the axis.
    fn unit(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let (v, lo, hi) = if self.log {
            (v.ln(), self.lo.ln(), self.hi.ln())
        } else {
            (v, self.lo, self.hi)
        };
        Some((v - lo) / (hi - lo))
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let first = self.lo.log10().ceil() as i32;
            let last = self.hi.log10().floor() as i32;
            let mut out: Vec<f64> = (first..=last).map(|d| 10f64.powi(d)).collect();
            if out.len() < 2 {
                // Narrow range: fall back to 1-2-5 mantissa ticks.
                out.clear();
                let decade = 10f64.powi(self.lo.log10().floor() as i32);
                for mult in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0] {
                    let v = decade * mult;
                    if v >= self.lo * 0.999 && v <= self.hi * 1.001 {
                        out.push(v);
                    }
                }
            }
            out
        } else {
            let span = self.hi - self.lo;
            let raw = span / 6.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0]
                .iter()
                .map(|m| m * mag)
                .find(|s| *s >= raw)
                .unwrap_or(10.0 * mag);
            let mut out = Vec::new();
            let mut t = (self.lo / step).ceil() * step;
            while t <= self.hi + step * 1e-9 {
                out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
                t += step;
            }
            out
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a line chart. Log axes drop non-positive points.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_x: bool,
    log_y: bool,
) -> String {
    let x_axis = Axis::new(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
        log_x,
    );
    let y_axis = Axis::new(
        series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
        log_y,
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |u: f64| MARGIN_LEFT + u * plot_w;
    let py = |u: f64| MARGIN_TOP + (1.0 - u) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"13\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        fmt_px(WIDTH / 2.0),
        xml_escape(title)
    ));

    // Grid and tick labels.
    for t in x_axis.ticks() {
        if let Some(u) = x_axis.unit(t) {
            let x = px(u);
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{y1}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#dddddd\"/>\n",
                x = fmt_px(x),
                y1 = fmt_px(MARGIN_TOP),
                y2 = fmt_px(MARGIN_TOP + plot_h)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                fmt_px(x),
                fmt_px(MARGIN_TOP + plot_h + 20.0),
                fmt_tick(t)
            ));
        }
    }
    for t in y_axis.ticks() {
        if let Some(u) = y_axis.unit(t) {
            let y = py(u);
            svg.push_str(&format!(
                "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n",
                x1 = fmt_px(MARGIN_LEFT),
                x2 = fmt_px(MARGIN_LEFT + plot_w),
                y = fmt_px(y)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                fmt_px(MARGIN_LEFT - 8.0),
                fmt_px(y + 4.0),
                fmt_tick(t)
            ));
        }
    }

    // Frame and axis labels.
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        fmt_px(MARGIN_LEFT),
        fmt_px(MARGIN_TOP),
        fmt_px(plot_w),
        fmt_px(plot_h)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        fmt_px(MARGIN_LEFT + plot_w / 2.0),
        fmt_px(HEIGHT - 16.0),
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {y})\">{l}</text>\n",
        y = fmt_px(MARGIN_TOP + plot_h / 2.0),
        l = xml_escape(y_label)
    ));

    // Data polylines, clipped by skipping out-of-range segments entirely
    // (the axis covers the data, so only log-dropped points are skipped).
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut coords = String::new();
        let mut n = 0usize;
        for (x, y) in &s.points {
            if let (Some(ux), Some(uy)) = (x_axis.unit(*x), y_axis.unit(*y)) {
                coords.push_str(&format!("{},{} ", fmt_px(px(ux)), fmt_px(py(uy))));
                n += 1;
            }
        }
        if n > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"/>\n",
                coords.trim_end(),
                color
            ));
        } else if n == 1 {
            let (x, y) = s
                .points
                .iter()
                .find_map(|(x, y)| Some((x_axis.unit(*x)?, y_axis.unit(*y)?)))
                .unwrap();
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                fmt_px(px(x)),
                fmt_px(py(y)),
                color
            ));
        }
        // Legend entry.
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"/>\n",
            x1 = fmt_px(MARGIN_LEFT + plot_w - 150.0),
            x2 = fmt_px(MARGIN_LEFT + plot_w - 126.0),
            y = fmt_px(ly),
            c = color
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt_px(MARGIN_LEFT + plot_w - 120.0),
            fmt_px(ly + 4.0),
            xml_escape(&s.label)
        ));
    }

    // Structured comment with the value ranges, useful when eyeballing files.
    svg.push_str(&format!(
        "<!-- x: {} .. {} | y: {} .. {} -->\n",
        fmt(x_axis.lo),
        fmt(x_axis.hi),
        fmt(y_axis.lo),
        fmt(y_axis.hi)
    ));
    svg.push_str("</svg>\n");
    svg
}
