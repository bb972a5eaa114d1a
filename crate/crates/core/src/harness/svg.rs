use std::fmt::Write;

use crate::trainer::ExperimentLog;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

/// Per-row mean and population std of `eval_return` across logs, aligned by
/// row index and truncated to the shortest log. The x value is the mean step.
pub fn mean_std(logs: &[ExperimentLog]) -> Vec<(f64, f64, f64)> {
    let rows = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    let k = logs.len() as f64;
    (0..rows)
        .map(|i| {
            let x = logs.iter().map(|l| l.rows[i].step as f64).sum::<f64>() / k;
            let m = logs.iter().map(|l| l.rows[i].eval_return).sum::<f64>() / k;
            let v = logs.iter().map(|l| (l.rows[i].eval_return - m).powi(2)).sum::<f64>() / k;
            (x, m, v.sqrt())
        })
        .collect()
}

/// Self-contained SVG of mean evaluation return with a ±1 std band.
pub fn curves_svg(title: &str, logs: &[ExperimentLog]) -> String {
    let pts = mean_std(logs);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    if pts.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let (bx, by) = (H - BOTTOM, W - RIGHT);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{bx} H{by}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(fx), H - BOTTOM + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">env steps</text>"#, (LEFT + W - RIGHT) / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">eval return</text>"#,
        H / 2.0,
        H / 2.0
    );

    let mut band = String::new();
    for (i, p) in pts.iter().enumerate() {
        let _ = write!(band, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(p.0), py(p.1 + p.2));
    }
    for p in pts.iter().rev() {
        let _ = write!(band, "L{:.2},{:.2} ", px(p.0), py(p.1 - p.2));
    }
    band.push('Z');
    let _ = writeln!(s, r#"<path d="{band}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#);
    let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));
    s.push_str("</svg>\n");
    s
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}", v)
    } else {
        format!("{:.3}", v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
