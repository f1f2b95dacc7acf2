//! Plain SVG renderings. Coordinates are printed at fixed precision so the
//! same inputs give the same bytes.

use std::fmt::Write as _;

use crate::metrics::row_normalized_percent;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(w: usize, h: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Row-normalised confusion matrix (`m[gt][pred]`), one percentage per cell.
pub fn confusion_heatmap(m: &[Vec<u64>], title: &str) -> String {
    let k = m.len();
    let cell = 56.0;
    let (x0, y0) = (70.0, 50.0);
    let w = (x0 + cell * k as f64 + 20.0) as usize;
    let h = (y0 + cell * k as f64 + 50.0) as usize;
    let pct = row_normalized_percent(m);
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        w / 2,
        escape(title)
    );
    for (i, row) in pct.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let shade = 255 - (p / 100.0 * 200.0).round() as u8;
            let (x, y) = (x0 + cell * j as f64, y0 + cell * i as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#888\"/>"
            );
            let fg = if p > 60.0 { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<text class=\"cell\" data-row=\"{i}\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{fg}\">{p:.1}%</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{i}</text>",
            x0 - 8.0,
            y0 + cell * i as f64 + cell / 2.0 + 4.0
        );
    }
    for j in 0..k {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{j}</text>",
            x0 + cell * j as f64 + cell / 2.0,
            y0 + cell * k as f64 + 16.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">predicted</text>",
        x0 + cell * k as f64 / 2.0,
        h - 8
    );
    s.push_str("</svg>\n");
    s
}

/// Polylines on a unit square, e.g. precision-recall curves.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (480usize, 360usize);
    let (x0, y0, pw, ph) = (60.0, 40.0, 300.0, 260.0);
    let (xmax, ymax) = series
        .iter()
        .flat_map(|(_, pts)| pts.iter())
        .fold((1.0f64, 1.0f64), |(a, b), &(x, y)| (a.max(x), b.max(y)));
    let px = |x: f64| x0 + pw * x / xmax;
    let py = |y: f64| y0 + ph * (1.0 - y / ymax);
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        w / 2,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        x0 + pw / 2.0,
        y0 + ph + 32.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        y0 + ph / 2.0,
        y0 + ph / 2.0,
        escape(y_label)
    );
    for (t, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
            px(t * xmax),
            y0 + ph + 16.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>",
            x0 - 6.0,
            py(t * ymax) + 4.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        let ly = y0 + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            x0 + pw + 12.0,
            ly - 9.0,
            x0 + pw + 26.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per entry of `groups`, one bar per series.
/// Non-finite values are drawn as empty slots.
pub fn bar_chart(title: &str, groups: &[String], series: &[(String, Vec<f64>)]) -> String {
    let bar = 18.0;
    let gap = 24.0;
    let group_w = bar * series.len().max(1) as f64 + gap;
    let (x0, y0, ph) = (50.0, 40.0, 220.0);
    let w = (x0 + group_w * groups.len() as f64 + 140.0) as usize;
    let h = (y0 + ph + 60.0) as usize;
    let lo = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::min);
    let hi = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let py = |v: f64| y0 + ph * (hi - v) / (hi - lo);
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        w / 2,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        py(0.0),
        x0 + group_w * groups.len() as f64,
        py(0.0)
    );
    for (g, name) in groups.iter().enumerate() {
        let gx = x0 + gap / 2.0 + group_w * g as f64;
        for (k, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(g) else { continue };
            if !v.is_finite() {
                continue;
            }
            let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{v:.4}</title></rect>",
                gx + bar * k as f64,
                bottom - top,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            gx + bar * series.len() as f64 / 2.0,
            y0 + ph + 18.0,
            escape(name)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let lx = x0 + group_w * groups.len() as f64 + 16.0;
        let ly = y0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>",
            ly - 9.0,
            PALETTE[k % PALETTE.len()],
            lx + 14.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
