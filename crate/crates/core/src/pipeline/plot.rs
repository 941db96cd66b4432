//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 96.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

/// A "nice" upper axis bound at or above `v`.
fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if v <= m * mag {
            return m * mag;
        }
    }
    10.0 * mag
}

fn y_axis(out: &mut String, max: f64, label: &str) {
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=4 {
        let v = max * i as f64 / 4.0;
        let y = H - BOTTOM - plot_h * i as f64 / 4.0;
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, LEFT - 4.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(label)
    );
}

/// Vertical bars, one per label; missing values leave an empty slot.
pub fn bar_chart(title: &str, labels: &[&str], values: &[Option<f64>], y_label: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = nice_max(values.iter().flatten().fold(0.0f64, |a, &b| a.max(b)));
    y_axis(&mut out, max, y_label);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / labels.len().max(1) as f64;
    for (i, (name, v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64;
        if let Some(v) = v {
            let h = plot_h * (v / max).clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4878a8"><title>{}: {v:.2}</title></rect>"##,
                x + slot * 0.15,
                H - BOTTOM - h,
                slot * 0.7,
                escape(name)
            );
        }
        let (tx, ty) = (x + slot / 2.0, H - BOTTOM + 10.0);
        let _ = writeln!(
            out,
            r#"<text x="{tx:.2}" y="{ty:.2}" text-anchor="end" transform="rotate(-60 {tx:.2} {ty:.2})">{}</text>"#,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of `(x, y)` pairs with an optional note under the title.
pub fn scatter(title: &str, xs: &[f64], ys: &[f64], x_label: &str, y_label: &str, note: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(out, r#"<text x="{}" y="32" text-anchor="middle">{}</text>"#, W / 2.0, escape(note));
    let ymax = nice_max(ys.iter().fold(0.0f64, |a, &b| a.max(b)));
    y_axis(&mut out, ymax, y_label);
    let xmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (xmin, xmax) = if xs.is_empty() || xmax <= xmin { (xmin.min(0.0), xmin.max(0.0) + 1.0) } else { (xmin, xmax) };
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=4 {
        let v = xmin + (xmax - xmin) * i as f64 / 4.0;
        let x = LEFT + plot_w * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#, H - BOTTOM + 16.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - BOTTOM + 40.0,
        escape(x_label)
    );
    for (&x, &y) in xs.iter().zip(ys) {
        let px = LEFT + plot_w * (x - xmin) / (xmax - xmin);
        let py = H - BOTTOM - plot_h * (y / ymax).clamp(0.0, 1.0);
        let _ = writeln!(out, r##"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="#c05040" fill-opacity="0.7"/>"##);
    }
    out.push_str("</svg>\n");
    out
}
