//! Minimal grouped bar charts as standalone SVG.

use std::fmt::Write;

pub struct BarGroup {
    pub label: String,
    pub values: Vec<f64>,
}

const COLORS: [&str; 4] = ["#1b5e20", "#81c784", "#90caf9", "#0d47a1"];

/// One panel per entry of `panels`, each with groups of bars sharing the
/// series labels in `series`.
pub fn grouped_bars(title: &str, y_label: &str, series: &[&str], panels: &[(String, Vec<BarGroup>)]) -> String {
    let (pw, ph, top, left, bottom) = (320.0, 260.0, 50.0, 60.0, 60.0);
    let width = left + pw * panels.len().max(1) as f64 + 20.0;
    let height = top + ph + bottom + 20.0;
    let ymax = panels
        .iter()
        .flat_map(|(_, g)| g.iter().flat_map(|b| b.values.iter().copied()))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(y_label)
    );
    for (p, (ptitle, groups)) in panels.iter().enumerate() {
        let x0 = left + pw * p as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + pw / 2.0, top - 8.0, esc(ptitle));
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##, top + ph, x0 + pw - 10.0, top + ph);
        let gw = (pw - 10.0) / groups.len().max(1) as f64;
        for (g, group) in groups.iter().enumerate() {
            let bw = gw * 0.8 / group.values.len().max(1) as f64;
            let gx = x0 + gw * g as f64 + gw * 0.1;
            for (b, &v) in group.values.iter().enumerate() {
                let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
                let h = ph * v / ymax;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {:.4}</title></rect>"#,
                    gx + bw * b as f64,
                    top + ph - h,
                    bw * 0.95,
                    h,
                    COLORS[b % COLORS.len()],
                    esc(series.get(b).copied().unwrap_or("")),
                    v
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                gx + gw * 0.4,
                top + ph + 16.0,
                esc(&group.label)
            );
        }
    }
    for (b, name) in series.iter().enumerate() {
        let x = left + 110.0 * b as f64;
        let y = top + ph + 40.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[b % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
