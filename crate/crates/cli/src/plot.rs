//! Static SVG figures: real vs generated channel overlays and 2-D scatters.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, Axis};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 120.0;
const MARGIN: f64 = 40.0;

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xmin) / (self.xmax - self.xmin).max(1e-12) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.ymin) / (self.ymax - self.ymin).max(1e-12) * self.h
    }
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn band(mean: &[f64], std: &[f64], f: &Frame, color: &str, out: &mut String) {
    let mut pts = String::new();
    for (l, (m, s)) in mean.iter().zip(std).enumerate() {
        let _ = write!(pts, "{:.2},{:.2} ", f.px(l as f64), f.py(m + s));
    }
    for (l, (m, s)) in mean.iter().zip(std).enumerate().rev() {
        let _ = write!(pts, "{:.2},{:.2} ", f.px(l as f64), f.py(m - s));
    }
    let _ = writeln!(
        out,
        r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
        pts.trim_end()
    );
    let line: Vec<String> = mean
        .iter()
        .enumerate()
        .map(|(l, m)| format!("{:.2},{:.2}", f.px(l as f64), f.py(*m)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        line.join(" ")
    );
}

/// One panel per channel: mean over sequences with a ±1 std band, real in
/// blue and generated in orange.
pub fn overlay_svg(real: &Array3<f64>, generated: &Array3<f64>, title: &str) -> String {
    let (_, len, d) = real.dim();
    let stats = |a: &Array3<f64>| (a.mean_axis(Axis(0)).unwrap(), a.std_axis(Axis(0), 0.0));
    let (rm, rs) = stats(real);
    let (gm, gs) = stats(generated);
    let height = MARGIN + d as f64 * (PANEL_H + 20.0) + 20.0;
    let mut out = String::new();
    header(&mut out, PANEL_W + 2.0 * MARGIN, height, title);
    let _ = writeln!(
        out,
        r#"<text x="{:.0}" y="20" fill="{}">real</text>"#,
        PANEL_W - 60.0,
        PALETTE[0]
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.0}" y="20" fill="{}">generated</text>"#,
        PANEL_W - 20.0,
        PALETTE[1]
    );
    for c in 0..d {
        let col = |a: &Array2<f64>| a.column(c).to_vec();
        let (rmc, rsc, gmc, gsc) = (col(&rm), col(&rs), col(&gm), col(&gs));
        let lo = rmc
            .iter()
            .zip(&rsc)
            .chain(gmc.iter().zip(&gsc))
            .map(|(m, s)| m - s)
            .fold(f64::INFINITY, f64::min);
        let hi = rmc
            .iter()
            .zip(&rsc)
            .chain(gmc.iter().zip(&gsc))
            .map(|(m, s)| m + s)
            .fold(f64::NEG_INFINITY, f64::max);
        let frame = Frame {
            x0: MARGIN,
            y0: MARGIN + c as f64 * (PANEL_H + 20.0),
            w: PANEL_W,
            h: PANEL_H,
            xmin: 0.0,
            xmax: (len.max(2) - 1) as f64,
            ymin: lo,
            ymax: hi,
        };
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#999"/>"##,
            frame.x0, frame.y0, frame.w, frame.h
        );
        let _ = writeln!(out, r#"<text x="4" y="{:.2}">ch {c}</text>"#, frame.y0 + 12.0);
        let _ = writeln!(out, r#"<text x="4" y="{:.2}">{hi:.2}</text>"#, frame.y0 + 24.0);
        let _ = writeln!(out, r#"<text x="4" y="{:.2}">{lo:.2}</text>"#, frame.y0 + frame.h);
        band(&rmc, &rsc, &frame, PALETTE[0], &mut out);
        band(&gmc, &gsc, &frame, PALETTE[1], &mut out);
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of `[N, 2]` points colored by integer label.
pub fn scatter_svg(points: &Array2<f64>, labels: &[usize], title: &str) -> String {
    let size = 360.0;
    let mut out = String::new();
    header(&mut out, size + 2.0 * MARGIN, size + 2.0 * MARGIN, title);
    let range = |c: usize| {
        let col = points.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    };
    let ((xmin, xmax), (ymin, ymax)) = (range(0), range(1));
    let frame = Frame {
        x0: MARGIN,
        y0: MARGIN,
        w: size,
        h: size,
        xmin,
        xmax,
        ymin,
        ymax,
    };
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{size}" height="{size}" fill="none" stroke="#999"/>"##
    );
    for (p, &label) in points.outer_iter().zip(labels) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            frame.px(p[0]),
            frame.py(p[1]),
            PALETTE[label % PALETTE.len()]
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.0}">PC1 →, PC2 ↑</text>"#,
        size + MARGIN + 16.0
    );
    out.push_str("</svg>\n");
    out
}
