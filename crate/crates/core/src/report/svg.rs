//! Minimal deterministic SVG charts.
//!
//! Every mark carries `data-*` attributes with the plotted value and its interval
//! half-width, and the root carries `data-scale` (pixels per unit), so a chart can be
//! parsed back and checked against the numbers it was drawn from.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 80.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    /// Bars sharing a group are drawn side by side under one axis label.
    pub group: String,
    pub value: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub x_half_width: f64,
    pub y_half_width: f64,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, kind: &str, title: &str, extra: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-chart="{kind}"{extra}>"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.3}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Range covering every value ± half-width and zero, padded by 5%.
fn span(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (v, h) in values {
        lo = lo.min(v - h);
        hi = hi.max(v + h);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    (lo - if lo < 0.0 { pad } else { 0.0 }, hi + if hi > 0.0 { pad } else { 0.0 })
}

fn y_axis(out: &mut String, lo: f64, hi: f64, to_y: &dyn Fn(f64) -> f64, label: &str) {
    let _ = writeln!(out, r##"<line x1="{LEFT:.3}" y1="{TOP:.3}" x2="{LEFT:.3}" y2="{:.3}" stroke="#333"/>"##, HEIGHT - BOTTOM);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = to_y(v);
        let _ = writeln!(out, r##"<line x1="{:.3}" y1="{y:.3}" x2="{LEFT:.3}" y2="{y:.3}" stroke="#333"/>"##, LEFT - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.3}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.3})">{}</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        escape(label)
    );
}

/// Vertical bars with CI whiskers, grouped by `Bar::group` in first-seen order.
pub fn bar_chart(kind: &str, title: &str, y_label: &str, bars: &[Bar]) -> String {
    let (lo, hi) = span(bars.iter().map(|b| (b.value, b.half_width)));
    let plot_h = HEIGHT - TOP - BOTTOM;
    let scale = plot_h / (hi - lo);
    let to_y = |v: f64| TOP + (hi - v) * scale;
    let zero = to_y(0.0);

    let mut groups: Vec<&str> = Vec::new();
    for b in bars {
        if !groups.contains(&b.group.as_str()) {
            groups.push(&b.group);
        }
    }
    let mut series: Vec<&str> = Vec::new();
    for b in bars {
        if !series.contains(&b.label.as_str()) {
            series.push(&b.label);
        }
    }
    let group_w = (WIDTH - LEFT - RIGHT) / groups.len().max(1) as f64;

    let mut out = String::new();
    header(&mut out, kind, title, &format!(r#" data-scale="{scale:.6}" data-zero="{zero:.3}""#));
    y_axis(&mut out, lo, hi, &to_y, y_label);
    let _ = writeln!(out, r##"<line x1="{LEFT:.3}" y1="{zero:.3}" x2="{:.3}" y2="{zero:.3}" stroke="#333"/>"##, WIDTH - RIGHT);
    for (gi, g) in groups.iter().enumerate() {
        let members: Vec<&Bar> = bars.iter().filter(|b| b.group == *g).collect();
        let bar_w = 0.8 * group_w / members.len() as f64;
        let x0 = LEFT + gi as f64 * group_w + 0.1 * group_w;
        for (bi, b) in members.iter().enumerate() {
            let x = x0 + bi as f64 * bar_w;
            let top = to_y(b.value.max(0.0));
            let height = b.value.abs() * scale;
            let color = PALETTE[series.iter().position(|s| *s == b.label).unwrap_or(0) % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{x:.3}" y="{top:.3}" width="{:.3}" height="{height:.3}" fill="{color}" data-group="{}" data-label="{}" data-value="{:.6}" data-half-width="{:.6}"/>"#,
                bar_w * 0.9,
                escape(g),
                escape(&b.label),
                b.value,
                b.half_width
            );
            let cx = x + bar_w * 0.45;
            let (y1, y2) = (to_y(b.value + b.half_width), to_y(b.value - b.half_width));
            let _ = writeln!(
                out,
                r##"<line class="ci" x1="{cx:.3}" y1="{y1:.3}" x2="{cx:.3}" y2="{y2:.3}" stroke="#111" stroke-width="1.5"/>"##
            );
            for y in [y1, y2] {
                let _ = writeln!(out, r##"<line x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="#111"/>"##, cx - 4.0, cx + 4.0);
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            LEFT + (gi as f64 + 0.5) * group_w,
            HEIGHT - BOTTOM + 18.0,
            escape(g)
        );
    }
    if series.len() > 1 {
        for (si, s) in series.iter().enumerate() {
            let x = LEFT + si as f64 * 120.0;
            let y = HEIGHT - 24.0;
            let _ = writeln!(out, r#"<rect x="{x:.3}" y="{:.3}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[si % PALETTE.len()]);
            let _ = writeln!(out, r#"<text x="{:.3}" y="{y:.3}" font-family="sans-serif" font-size="11">{}</text>"#, x + 14.0, escape(s));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter with horizontal and vertical CI whiskers.
pub fn scatter(kind: &str, title: &str, x_label: &str, y_label: &str, points: &[Point]) -> String {
    let (ylo, yhi) = span(points.iter().map(|p| (p.y, p.y_half_width)));
    let (xlo, xhi) = span(points.iter().map(|p| (p.x, p.x_half_width)));
    let (plot_w, plot_h) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let (sx, sy) = (plot_w / (xhi - xlo), plot_h / (yhi - ylo));
    let to_x = |v: f64| LEFT + (v - xlo) * sx;
    let to_y = |v: f64| TOP + (yhi - v) * sy;

    let mut out = String::new();
    header(
        &mut out,
        kind,
        title,
        &format!(r#" data-x-scale="{sx:.6}" data-y-scale="{sy:.6}" data-x-min="{xlo:.6}" data-y-max="{yhi:.6}""#),
    );
    y_axis(&mut out, ylo, yhi, &to_y, y_label);
    let base = HEIGHT - BOTTOM;
    let _ = writeln!(out, r##"<line x1="{LEFT:.3}" y1="{base:.3}" x2="{:.3}" y2="{base:.3}" stroke="#333"/>"##, WIDTH - RIGHT);
    for i in 0..=4 {
        let v = xlo + (xhi - xlo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            to_x(v),
            base + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        base + 36.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="#999" stroke-dasharray="4 3"/>"##,
        to_y(0.0),
        WIDTH - RIGHT,
        to_y(0.0)
    );
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = (to_x(p.x), to_y(p.y));
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r##"<line class="ci-x" x1="{:.3}" y1="{cy:.3}" x2="{:.3}" y2="{cy:.3}" stroke="#111"/>"##,
            to_x(p.x - p.x_half_width),
            to_x(p.x + p.x_half_width)
        );
        let _ = writeln!(
            out,
            r##"<line class="ci-y" x1="{cx:.3}" y1="{:.3}" x2="{cx:.3}" y2="{:.3}" stroke="#111"/>"##,
            to_y(p.y + p.y_half_width),
            to_y(p.y - p.y_half_width)
        );
        let _ = writeln!(
            out,
            r#"<circle class="point" cx="{cx:.3}" cy="{cy:.3}" r="5" fill="{color}" data-label="{}" data-x="{:.6}" data-y="{:.6}" data-x-half-width="{:.6}" data-y-half-width="{:.6}"/>"#,
            escape(&p.label),
            p.x,
            p.y,
            p.x_half_width,
            p.y_half_width
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11">{}</text>"#,
            cx + 7.0,
            cy - 7.0,
            escape(&p.label)
        );
    }
    out.push_str("</svg>\n");
    out
}
