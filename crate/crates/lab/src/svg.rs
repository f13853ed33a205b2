//! Self-contained SVG line and bar charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 140.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 44.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, y: (f64, f64), x: Option<(f64, f64)>) {
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let py = y1 - f * (y1 - y0);
        let v = y.0 + f * (y.1 - y.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            fmt_tick(v)
        );
        if let Some((a, b)) = x {
            let px = x0 + f * (x1 - x0);
            let _ = writeln!(
                out,
                r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
                y1 + 16.0,
                fmt_tick(a + f * (b - a))
            );
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Line chart of named `(x, y)` series.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xs = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ys = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    axes(&mut out, ys, Some(xs));
    let sx = |x: f64| PAD_L + (x - xs.0) / (xs.1 - xs.0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - (y - ys.0) / (ys.1 - ys.0) * (H - PAD_T - PAD_B);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLOURS[i % COLOURS.len()];
        let d: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<path d="{}" stroke="{c}" stroke-width="1.5" fill="none"/>"#,
            d.join(" ")
        );
        let ly = PAD_T + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{c}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD_R + 10.0,
            ly,
            W - PAD_R + 26.0,
            ly + 5.0,
            esc(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 8.0,
        esc(x_label)
    );
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let ys = bounds(
        series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .chain(std::iter::once(0.0)),
    );
    axes(&mut out, ys, None);
    let sy = |y: f64| H - PAD_B - (y - ys.0) / (ys.1 - ys.0) * (H - PAD_T - PAD_B);
    let group = (W - PAD_L - PAD_R) / labels.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = PAD_L + g as f64 * group + group * 0.1;
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0);
            let (top, bottom) = (sy(v.max(0.0)), sy(v.min(0.0)));
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + i as f64 * bar,
                top,
                bar,
                (bottom - top).max(0.0),
                COLOURS[i % COLOURS.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - PAD_B + 16.0,
            esc(label)
        );
    }
    for (i, (name, _)) in series.iter().enumerate() {
        let ly = PAD_T + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="8" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD_R + 10.0,
            ly - 3.0,
            COLOURS[i % COLOURS.len()],
            W - PAD_R + 26.0,
            ly + 5.0,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart("loss", "step", &[("a<b".into(), vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        let b = bar_chart("drift", &["0".into(), "1".into()], &[("x".into(), vec![0.0, 0.2])]);
        assert_eq!(b.matches("<rect").count(), 1 + 2 + 1);
    }

    #[test]
    fn empty_and_flat_series_do_not_divide_by_zero() {
        let s = line_chart("t", "x", &[("flat".into(), vec![(0.0, 2.0), (0.0, 2.0)])]);
        assert!(!s.contains("NaN"));
        let s = line_chart("t", "x", &[]);
        assert!(!s.contains("NaN"));
    }
}
