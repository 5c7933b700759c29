//! Static SVG charts: grouped bars for per-attack error increases and
//! activation-versus-budget curves for attack traces.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 110.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round-number tick step giving roughly `target` ticks over `span`.
fn tick_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * mag >= raw {
            return m * mag;
        }
    }
    10.0 * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = tick_step(hi - lo, 5);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
}

fn y_axis(out: &mut String, f: &Frame, label: &str, fmt: impl Fn(f64) -> String) {
    for t in ticks(f.y0, f.y1) {
        let y = f.py(t);
        writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            fmt(t)
        )
        .unwrap();
    }
    let mid = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0;
    writeln!(
        out,
        r#"<text x="16" y="{mid:.1}" text-anchor="middle" transform="rotate(-90 16 {mid:.1})">{}</text>"#,
        escape(label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{:.1}" stroke="black"/>"#,
        HEIGHT - MARGIN_BOTTOM
    )
    .unwrap();
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_TOP + 8.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT + 12.0;
        writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        )
        .unwrap();
    }
}

/// One bar series: a name and one value per category.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

/// Grouped bar chart with a zero line; missing values leave a gap.
pub fn grouped_bars(title: &str, y_label: &str, categories: &[String], series: &[BarSeries]) -> String {
    let values: Vec<f64> = series.iter().flat_map(|s| s.values.iter().flatten().copied()).collect();
    let lo = values.iter().copied().fold(0.0, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let pad = 0.05 * (hi - lo).max(1e-9);
    let step = tick_step(hi - lo + 2.0 * pad, 5);
    let f = Frame {
        x0: 0.0,
        x1: categories.len().max(1) as f64,
        y0: if lo < 0.0 { ((lo - pad) / step).floor() * step } else { 0.0 },
        y1: ((hi + pad) / step).ceil() * step,
    };
    let mut out = String::new();
    header(&mut out, title);
    let y_step = tick_step(f.y1 - f.y0, 5);
    y_axis(&mut out, &f, y_label, |t| format_tick(t, y_step));
    let group = f.px(1.0) - f.px(0.0);
    let bar = 0.8 * group / series.len().max(1) as f64;
    for (si, s) in series.iter().enumerate() {
        for (ci, v) in s.values.iter().enumerate() {
            let Some(v) = v else { continue };
            let x = f.px(ci as f64) + 0.1 * group + bar * si as f64;
            let (a, b) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
            writeln!(
                out,
                r#"<rect x="{x:.1}" y="{a:.1}" width="{bar:.1}" height="{:.1}" fill="{}"><title>{}: {v:.2}</title></rect>"#,
                (b - a).max(0.5),
                PALETTE[si % PALETTE.len()],
                escape(&s.name)
            )
            .unwrap();
        }
    }
    writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{z:.1}" x2="{:.1}" y2="{z:.1}" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT,
        z = f.py(0.0)
    )
    .unwrap();
    for (ci, c) in categories.iter().enumerate() {
        let x = f.px(ci as f64 + 0.5);
        let y = HEIGHT - MARGIN_BOTTOM + 10.0;
        writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="end" transform="rotate(-45 {x:.1} {y:.1})">{}</text>"#,
            escape(c)
        )
        .unwrap();
    }
    let names: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// A polyline series of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart on `[0, x_max] × [0, 1]` with an optional horizontal marker.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[LineSeries], marker: Option<f64>) -> String {
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0, f64::max)
        .max(1e-6);
    let step = tick_step(x_max, 5);
    let f = Frame {
        x0: 0.0,
        x1: (x_max / step).ceil() * step,
        y0: 0.0,
        y1: 1.0,
    };
    let mut out = String::new();
    header(&mut out, title);
    y_axis(&mut out, &f, y_label, |t| format!("{t:.1}"));
    let base = HEIGHT - MARGIN_BOTTOM;
    writeln!(out, r#"<line x1="{MARGIN_LEFT}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#, WIDTH - MARGIN_RIGHT)
        .unwrap();
    let x_step = tick_step(f.x1 - f.x0, 5);
    for t in ticks(f.x0, f.x1) {
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(t),
            base + 16.0,
            format_tick(t, x_step)
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        base + 40.0,
        escape(x_label)
    )
    .unwrap();
    if let Some(m) = marker {
        writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
            WIDTH - MARGIN_RIGHT,
            y = f.py(m)
        )
        .unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y.clamp(0.0, 1.0)))).collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        )
        .unwrap();
    }
    let names: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

fn format_tick(t: f64, step: f64) -> String {
    let mag = step.log10().floor();
    let extra = ((step / 10f64.powf(mag) - 2.5).abs() < 1e-9) as usize;
    let decimals = (-mag).max(0.0) as usize + extra;
    format!("{t:.decimals$}")
}
