//! Minimal deterministic SVG charts.
//!
//! Pure string builders, no layout engine: fixed canvas, nice-number axis
//! ticks, a small color cycle. Every chart the lab writes has a sibling CSV
//! carrying the exact plotted numbers, so these stay presentation-only.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: true,
        }
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn fmt(v: f64) -> String {
    // Fixed-point with trimmed zeros keeps coordinates stable and short.
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Step from the 1-2-5 ladder giving 4 to 9 ticks over the span.
fn tick_step(span: f64) -> f64 {
    if !(span > 0.0) || !span.is_finite() {
        return 1.0;
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if mag * m >= raw {
            return mag * m;
        }
    }
    mag * 10.0
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = tick_step(hi - lo);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + step * 1e-9 {
        // Snap near-zero ticks produced by floating steps.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Self {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in ys {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        if !x_lo.is_finite() {
            (x_lo, x_hi) = (0.0, 1.0);
        }
        if !y_lo.is_finite() {
            (y_lo, y_hi) = (0.0, 1.0);
        }
        if x_hi - x_lo < 1e-12 {
            x_lo -= 0.5;
            x_hi += 0.5;
        }
        if y_hi - y_lo < 1e-12 {
            y_lo -= 0.5;
            y_hi += 0.5;
        }
        let pad = (y_hi - y_lo) * 0.05;
        Self {
            x_lo,
            x_hi,
            y_lo: y_lo - pad,
            y_hi: y_hi + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT
            - MARGIN_B
            - (y - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        cx = WIDTH / 2.0,
        title = escape(title),
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#333\"/>\n"
    ));
    for t in ticks(frame.x_lo, frame.x_hi) {
        let px = frame.px(t);
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{y}\" stroke=\"#333\"/>\n\
             <text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\">{label}</text>\n",
            x = fmt(px),
            y = fmt(y0 + 5.0),
            ty = fmt(y0 + 20.0),
            label = tick_label(t),
        ));
    }
    for t in ticks(frame.y_lo, frame.y_hi) {
        let py = frame.py(t);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"#333\"/>\n\
             <line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"#eee\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{label}</text>\n",
            x = fmt(x0 - 5.0),
            y = fmt(py),
            tx = fmt(x0 - 8.0),
            ty = fmt(py + 4.0),
            label = tick_label(t),
        ));
    }
    out.push_str(&format!(
        "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n",
        cx = fmt((x0 + x1) / 2.0),
        by = fmt(HEIGHT - 14.0),
        cy = fmt((y0 + y1) / 2.0),
        xl = escape(x_label),
        yl = escape(y_label),
    ));
    out
}

fn legend(series: &[Series]) -> String {
    let mut out = String::new();
    let mut y = MARGIN_T + 10.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let x = WIDTH - MARGIN_R - 150.0;
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\n\
             <text x=\"{tx}\" y=\"{ty}\">{name}</text>\n",
            x1 = fmt(x),
            x2 = fmt(x + 24.0),
            y = fmt(y),
            tx = fmt(x + 30.0),
            ty = fmt(y + 4.0),
            name = escape(&s.name),
        ));
        y += 18.0;
    }
    out
}

/// Polyline chart; each series is one line in the palette cycle.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::from_series(series);
    let mut out = header(title);
    out.push_str(&axes(&frame, x_label, y_label));
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(frame.px(x)), fmt(frame.py(y))))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\n",
            coords.join(" ")
        ));
        if s.points.len() <= 40 {
            for &(x, y) in &s.points {
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    fmt(frame.px(x)),
                    fmt(frame.py(y))
                ));
            }
        }
    }
    out.push_str(&legend(series));
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart over labeled categories.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let y_hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12) * 1.1;
    let frame = Frame {
        x_lo: 0.0,
        x_hi: bars.len().max(1) as f64,
        y_lo: 0.0,
        y_hi,
    };
    let mut out = header(title);
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#333\"/>\n",
        y1 = MARGIN_T
    ));
    for t in ticks(0.0, y_hi) {
        let py = frame.py(t);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"#eee\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{label}</text>\n",
            y = fmt(py),
            tx = fmt(x0 - 8.0),
            ty = fmt(py + 4.0),
            label = tick_label(t),
        ));
    }
    let slot = (x1 - x0) / bars.len().max(1) as f64;
    for (i, (name, value)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let bx = x0 + slot * (i as f64 + 0.2);
        let bw = slot * 0.6;
        let by = frame.py(*value);
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{color}\"/>\n\
             <text x=\"{cx}\" y=\"{vy}\" text-anchor=\"middle\">{v}</text>\n\
             <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">{name}</text>\n",
            x = fmt(bx),
            y = fmt(by),
            w = fmt(bw),
            h = fmt(y0 - by),
            cx = fmt(bx + bw / 2.0),
            vy = fmt(by - 6.0),
            v = tick_label(*value),
            ly = fmt(y0 + 20.0),
            name = escape(name),
        ));
    }
    out.push_str(&format!(
        "<text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n",
        cy = fmt((y0 + MARGIN_T) / 2.0),
        yl = escape(y_label),
    ));
    out.push_str("</svg>\n");
    out
}
