//! Self-contained SVG charts.

use std::fmt::Write as _;

use survfuse::KmCurve;

pub const LOW_RISK_COLOR: &str = "#1f77b4";
pub const HIGH_RISK_COLOR: &str = "#ff7f0e";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 56.0;

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn y_ticks(out: &mut String, max: f64) {
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let y = HEIGHT - BOTTOM - (HEIGHT - BOTTOM - TOP) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
}

/// Kaplan–Meier step curves for the low- and high-risk groups with the log-rank p.
pub fn km_plot(low: &KmCurve, high: &KmCurve, p: f64, max_time: f64) -> String {
    let mut out = String::new();
    header(&mut out, "Kaplan-Meier curves by median risk");
    axes(&mut out, "time", "survival probability");
    y_ticks(&mut out, 1.0);
    let t_max = if max_time > 0.0 { max_time } else { 1.0 };
    let px = |t: f64| LEFT + (WIDTH - LEFT - RIGHT) * t / t_max;
    let py = |s: f64| HEIGHT - BOTTOM - (HEIGHT - BOTTOM - TOP) * s;
    for k in 0..=4 {
        let t = t_max * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{:.2}</text>"#,
            px(t),
            HEIGHT - BOTTOM + 16.0,
            t
        );
    }
    for (curve, color, name) in [(low, LOW_RISK_COLOR, "low risk"), (high, HIGH_RISK_COLOR, "high risk")] {
        let mut d = format!("M{:.2},{:.2}", px(0.0), py(1.0));
        for (t, s) in curve.times.iter().zip(&curve.survival) {
            let _ = write!(d, " H{:.2} V{:.2}", px(*t), py(*s));
        }
        let _ = write!(d, " H{:.2}", px(t_max));
        let _ = writeln!(
            out,
            r#"<path class="km" data-group="{name}" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#
        );
    }
    let lx = WIDTH - RIGHT - 150.0;
    for (i, (color, name)) in [(LOW_RISK_COLOR, "low risk"), (HIGH_RISK_COLOR, "high risk")].iter().enumerate() {
        let y = TOP + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 24.0,
            lx + 30.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text id="p-value" x="{}" y="{}">log-rank p = {}</text>"#,
        LEFT + 12.0,
        HEIGHT - BOTTOM - 12.0,
        format_p(p)
    );
    out.push_str("</svg>\n");
    out
}

pub fn format_p(p: f64) -> String {
    if p >= 1e-4 {
        format!("{p:.4}")
    } else {
        format!("{p:.2e}")
    }
}

/// One bar per expert with its average gate weight.
pub fn gate_plot(weights: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, "Average gate weights per expert");
    axes(&mut out, "expert", "average gate weight");
    let top = weights.iter().copied().fold(0.0, f64::max).max(1e-12);
    let y_max = (top * 1.2).min(1.0).max(top);
    y_ticks(&mut out, y_max);
    let n = weights.len().max(1) as f64;
    let slot = (WIDTH - LEFT - RIGHT) / n;
    let plot_h = HEIGHT - BOTTOM - TOP;
    for (i, w) in weights.iter().enumerate() {
        let h = plot_h * w / y_max;
        let x = LEFT + slot * (i as f64 + 0.2);
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-expert="{}" data-weight="{w}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{LOW_RISK_COLOR}"/>"#,
            i + 1,
            HEIGHT - BOTTOM - h,
            slot * 0.6
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{w:.4}</text><text x="{:.2}" y="{}" text-anchor="middle">E{}</text>"#,
            x + slot * 0.3,
            HEIGHT - BOTTOM - h - 4.0,
            x + slot * 0.3,
            HEIGHT - BOTTOM + 16.0,
            i + 1
        );
    }
    let sum: f64 = weights.iter().sum();
    let _ = writeln!(
        out,
        r#"<text id="weight-sum" x="{}" y="{}">sum of weights = {sum:.6}</text>"#,
        LEFT + 12.0,
        TOP + 4.0
    );
    out.push_str("</svg>\n");
    out
}
