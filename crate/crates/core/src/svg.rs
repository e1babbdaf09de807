//! Minimal static SVG charts for the report outputs.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 44.0;

pub const PALETTE: [&str; 4] = ["#d95f02", "#1b9e77", "#7570b3", "#666666"];

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Value range padded so flat series still get a visible axis.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi - lo).is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, s: &mut String, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            "<path d=\"M{x0},{y0} V{y1} H{x1}\" fill=\"none\" stroke=\"black\"/>"
        );
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>\
                 <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                tick(v)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            (x0 + x1) / 2.0,
            H - 8.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let x = W - RIGHT - 110.0;
        let y = TOP + 6.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 16.0,
            y,
            escape(name)
        );
    }
}

/// One group per category, one bar per series. `values[series][category]`.
pub fn grouped_bars(
    title: &str,
    categories: &[String],
    series: &[&str],
    values: &[Vec<f64>],
    y_label: &str,
) -> String {
    let max = values.iter().flatten().copied().fold(0.0_f64, f64::max);
    let f = Frame {
        x: (0.0, categories.len().max(1) as f64),
        y: (0.0, if max > 0.0 { max * 1.1 } else { 1.0 }),
    };
    let mut s = header(title);
    f.axes(&mut s, "scenario", y_label);
    let slot = f.px(1.0) - f.px(0.0);
    let bar = 0.8 * slot / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        for (k, vals) in values.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(0.0).max(0.0);
            let x = f.px(c as f64) + 0.1 * slot + bar * k as f64;
            let y = f.py(v);
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                f.py(0.0) - y,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            f.px(c as f64 + 0.5),
            H - BOTTOM + 14.0,
            escape(name)
        );
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

/// Polylines sharing one x axis. Non-finite points are skipped.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    let pts = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xl, mut xh, mut yl, mut yh) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    let x = if xh > xl { (xl, xh) } else { padded(xl, xh) };
    let f = Frame {
        x,
        y: padded(yl, yh),
    };
    let mut s = header(title);
    f.axes(&mut s, x_label, y_label);
    for (k, (_, p)) in series.iter().enumerate() {
        let mut d = String::new();
        for &(x, y) in p.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(
                d,
                "{}{:.1},{:.1}",
                if d.is_empty() { "M" } else { " L" },
                f.px(x),
                f.py(y)
            );
        }
        if !d.is_empty() {
            let _ = writeln!(
                s,
                "<path d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}
