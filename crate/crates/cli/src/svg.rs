//! Minimal deterministic SVG charts: stacked line panels and bar charts.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error bars, one per point.
    pub errors: Option<Vec<f64>>,
}

pub struct LinePanel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

pub struct Bar {
    pub label: String,
    pub value: f64,
    pub error: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Range widened so degenerate or empty data still draws.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let pad = 0.5 * (1.0 + lo.abs()) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    top: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn plot_w() -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }
    fn plot_h() -> f64 {
        PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * Self::plot_w()
    }
    fn py(&self, y: f64) -> f64 {
        self.top + MARGIN_TOP + (1.0 - (y - self.y.0) / (self.y.1 - self.y.0)) * Self::plot_h()
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str, x_ticks: bool) {
        let (l, t) = (MARGIN_LEFT, self.top + MARGIN_TOP);
        let (w, h) = (Self::plot_w(), Self::plot_h());
        let _ = writeln!(out, r##"<rect x="{l:.1}" y="{t:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
            l + w / 2.0,
            self.top + 22.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            l + w / 2.0,
            t + h + 38.0,
            escape(x_label)
        );
        let (cx, cy) = (16.0, t + h / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{cy:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {cx:.1} {cy:.1})">{}</text>"#,
            escape(y_label)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let y = self.py(yv);
            let _ = writeln!(out, r##"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="#444"/>"##, l - 4.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
                l - 6.0,
                y + 3.0,
                fmt_tick(yv)
            );
            if x_ticks {
                let xv = self.x.0 + f * (self.x.1 - self.x.0);
                let x = self.px(xv);
                let _ = writeln!(out, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/>"##, t + h, t + h + 4.0);
                let _ = writeln!(
                    out,
                    r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                    t + h + 16.0,
                    fmt_tick(xv)
                );
            }
        }
    }

    fn legend(&self, out: &mut String, names: &[&str]) {
        let x = WIDTH - MARGIN_RIGHT + 12.0;
        for (i, name) in names.iter().enumerate() {
            let y = self.top + MARGIN_TOP + 8.0 + 18.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#,
                x + 18.0
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, x + 24.0, y + 4.0, escape(name));
        }
    }
}

fn document(height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Line panels stacked vertically in one document.
pub fn line_panels(panels: &[LinePanel]) -> String {
    let mut body = String::new();
    for (p, panel) in panels.iter().enumerate() {
        let all = || panel.series.iter().flat_map(|s| s.points.iter());
        let errs = |s: &Series, i: usize| s.errors.as_ref().map_or(0.0, |e| e[i]);
        let frame = Frame {
            top: p as f64 * PANEL_HEIGHT,
            x: span(all().map(|pt| pt.0)),
            y: span(panel.series.iter().flat_map(|s| {
                s.points.iter().enumerate().flat_map(move |(i, pt)| [pt.1 - errs(s, i), pt.1 + errs(s, i)])
            })),
        };
        frame.axes(&mut body, &panel.title, &panel.x_label, &panel.y_label, true);
        for (i, s) in panel.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|pt| pt.0.is_finite() && pt.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
                .collect();
            if pts.len() == 1 {
                let (x, y) = pts[0].split_once(',').unwrap();
                let _ = writeln!(body, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            } else if !pts.is_empty() {
                let _ = writeln!(
                    body,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            if let Some(errors) = &s.errors {
                for (&(x, y), &e) in s.points.iter().zip(errors) {
                    let _ = writeln!(
                        body,
                        r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                        frame.px(x),
                        frame.py(y - e),
                        frame.py(y + e)
                    );
                }
            }
        }
        let names: Vec<&str> = panel.series.iter().map(|s| s.name.as_str()).collect();
        frame.legend(&mut body, &names);
    }
    document(PANEL_HEIGHT * panels.len().max(1) as f64, &body)
}

/// Vertical bars with optional error whiskers, one per label.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut body = String::new();
    let lo = bars.iter().map(|b| b.value - b.error.unwrap_or(0.0)).fold(f64::INFINITY, f64::min);
    let (y0, y1) = span(bars.iter().flat_map(|b| [b.value - b.error.unwrap_or(0.0), b.value + b.error.unwrap_or(0.0)]));
    // Bars start at zero unless all values sit far above it.
    let y0 = if lo >= 0.0 && lo < 0.5 * y1 { 0.0 } else { y0 };
    let frame = Frame { top: 0.0, x: (0.0, bars.len().max(1) as f64), y: (y0, y1) };
    frame.axes(&mut body, title, "", y_label, false);
    let slot = Frame::plot_w() / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_LEFT + slot * (i as f64 + 0.15);
        let (top, base) = (frame.py(b.value), frame.py(y0));
        let _ = writeln!(
            body,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            slot * 0.7,
            (base - top).max(0.0)
        );
        if let Some(e) = b.error {
            let cx = x + slot * 0.35;
            let _ = writeln!(
                body,
                r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#000"/>"##,
                frame.py(b.value - e),
                frame.py(b.value + e)
            );
        }
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10" transform="rotate(-30 {0:.2} {1:.2})">{}</text>"#,
            x + slot * 0.35,
            PANEL_HEIGHT - MARGIN_BOTTOM + 14.0,
            escape(&b.label)
        );
    }
    let names: Vec<&str> = bars.iter().map(|b| b.label.as_str()).collect();
    frame.legend(&mut body, &names);
    document(PANEL_HEIGHT + 30.0, &body)
}
