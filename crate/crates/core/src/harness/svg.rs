use std::fmt::Write;

use super::eval::TraceRow;
use crate::envsim::{MAX_APERTURE_RATE, MAX_LINEAR};

const WIDTH: f64 = 960.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const BACKBONE_COLORS: [&str; 5] = ["#1f4e79", "#2e75b6", "#9dc3e6", "#f4b183", "#c55a11"];
const HEAD_COLORS: [&str; 3] = ["#385723", "#70ad47", "#c5e0b4"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Consecutive runs of equal values as `(start, len, value)`.
fn runs(levels: impl Iterator<Item = u8>) -> Vec<(usize, usize, u8)> {
    let mut out: Vec<(usize, usize, u8)> = Vec::new();
    for (i, v) in levels.enumerate() {
        match out.last_mut() {
            Some(r) if r.2 == v => r.1 += 1,
            _ => out.push((i, 1, v)),
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn band(svg: &mut String, id: &str, label: &str, y: f64, h: f64, dx: f64, levels: Vec<(usize, usize, u8)>, colors: &[&str]) {
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{label}</text>"#, LEFT - 6.0, y + h / 2.0 + 4.0);
    let _ = writeln!(svg, r#"<g id="{id}">"#);
    for (start, len, level) in levels {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{y:.1}" width="{:.2}" height="{h:.1}" fill="{}" data-level="{level}"/>"#,
            LEFT + start as f64 * dx,
            len as f64 * dx,
            colors[level as usize]
        );
    }
    svg.push_str("</g>\n");
}

fn polyline(svg: &mut String, id: &str, color: &str, points: impl Iterator<Item = (f64, f64)>) {
    let pts: Vec<String> = points.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        svg,
        r#"<polyline id="{id}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
        pts.join(" ")
    );
}

/// A self-contained SVG timeline of one episode: execution-mode bands for
/// the backbone and the head, with the probe score and the motion speeds
/// drawn underneath.
pub fn timeline_svg(rows: &[TraceRow], title: &str) -> String {
    let n = rows.len().max(1);
    let dx = (WIDTH - LEFT - RIGHT) / n as f64;
    let (plot_top, plot_h) = (130.0, 180.0);
    let height = plot_top + plot_h + 60.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, escape(title));
    band(&mut svg, "backbone-band", "backbone", 35.0, 30.0, dx, runs(rows.iter().map(|r| r.backbone)), &BACKBONE_COLORS);
    band(&mut svg, "head-band", "head", 75.0, 30.0, dx, runs(rows.iter().map(|r| r.head)), &HEAD_COLORS);

    // probe score on its own range, speeds as a fraction of their maxima
    let rho_min = rows.iter().map(|r| r.rho).fold(1.0, f64::min).min(0.99);
    let y_of = |v: f64| plot_top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let x_of = |i: usize| LEFT + (i as f64 + 0.5) * dx;
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{plot_top}" width="{:.1}" height="{plot_h}" fill="none" stroke="#999"/>"##,
        WIDTH - LEFT - RIGHT
    );
    polyline(
        &mut svg,
        "rho",
        "#000000",
        rows.iter().enumerate().map(|(i, r)| (x_of(i), y_of((r.rho - rho_min) / (1.0 - rho_min)))),
    );
    let trans_max = MAX_LINEAR * std::f64::consts::SQRT_2;
    polyline(&mut svg, "v-trans", "#d62728", rows.iter().enumerate().map(|(i, r)| (x_of(i), y_of(r.v_trans / trans_max))));
    polyline(&mut svg, "v-grip", "#9467bd", rows.iter().enumerate().map(|(i, r)| (x_of(i), y_of(r.v_grip / MAX_APERTURE_RATE))));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">1</text>"#, LEFT - 6.0, plot_top + 4.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">rho {rho_min:.3}</text>"#,
        LEFT - 6.0,
        plot_top + plot_h
    );

    let legend_y = plot_top + plot_h + 25.0;
    let mut x = LEFT;
    for (i, c) in BACKBONE_COLORS.iter().enumerate() {
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{c}"/>"#, legend_y - 9.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{legend_y:.1}" font-size="10">B{i}</text>"#, x + 13.0);
        x += 40.0;
    }
    for (i, c) in HEAD_COLORS.iter().enumerate() {
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{c}"/>"#, legend_y - 9.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{legend_y:.1}" font-size="10">H{i}</text>"#, x + 13.0);
        x += 40.0;
    }
    for (name, c) in [("rho", "#000000"), ("v_trans", "#d62728"), ("v_grip", "#9467bd")] {
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="2"/>"#,
            legend_y - 4.0,
            x + 14.0,
            legend_y - 4.0
        );
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{legend_y:.1}" font-size="10">{name}</text>"#, x + 18.0);
        x += 70.0;
    }
    svg.push_str("</svg>\n");
    svg
}
