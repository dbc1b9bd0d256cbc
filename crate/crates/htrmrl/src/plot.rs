//! Minimal SVG line and scatter plots. Presentation only: every plotted
//! number is also written to a CSV.
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if !x0.is_finite() {
            return Frame {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        let widen = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, x_label: &str, y_label: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (v, anchor_y) in [(f.y0, f.py(f.y0)), (f.y1, f.py(f.y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD - 6.0,
            anchor_y + 4.0,
            short(v)
        );
    }
    for (v, anchor_x) in [(f.x0, f.px(f.x0)), (f.x1, f.px(f.x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 16.0,
            short(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

fn short(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = PAD + 4.0 + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#,
            W - PAD - 150.0,
            y - 9.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, W - PAD - 135.0, escape(l));
    }
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = open(title, x_label, y_label, &f);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            pts.join(" ")
        );
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// Points coloured by label, labels in first-seen order.
pub fn scatter_plot(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.1, p.2)).collect();
    let f = Frame::fit(xy.iter());
    let mut s = open(title, x_label, y_label, &f);
    let mut labels: Vec<&str> = Vec::new();
    for (l, x, y) in points {
        let i = labels.iter().position(|k| k == l).unwrap_or_else(|| {
            labels.push(l);
            labels.len() - 1
        });
        if x.is_finite() && y.is_finite() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}" fill-opacity="0.7"/>"#,
                f.px(*x),
                f.py(*y),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}
