//! Minimal SVG output: log-log scatter with a fitted line, and histograms.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = write!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let (mut x0, mut x1) = min_max(xs);
        let (mut y0, mut y1) = min_max(ys);
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

/// Points `(x, y)` on log10 axes with the line `log10 y = intercept + slope·log10 x`.
pub fn loglog_svg(title: &str, xs: &[f64], ys: &[f64], slope: f64, intercept: f64, x_label: &str, y_label: &str) -> String {
    let lx: Vec<f64> = xs.iter().map(|x| x.log10()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.log10()).collect();
    let f = Frame::fit(&lx, &ly);
    let mut out = String::new();
    header(&mut out, title);
    for (&x, &y) in lx.iter().zip(&ly) {
        if x.is_finite() && y.is_finite() {
            let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#, f.px(x), f.py(y));
        }
    }
    let (a, b) = (f.x0, f.x1);
    let _ = write!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="4 3"/>"#,
        f.px(a),
        f.py(intercept + slope * a),
        f.px(b),
        f.py(intercept + slope * b)
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">log10 {}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {})" text-anchor="middle">log10 {}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">slope {:.3}</text>"#,
        W - PAD - 90.0,
        PAD + 12.0,
        slope
    );
    out.push_str("</svg>\n");
    out
}

/// Histogram of `values` over `bins` equal-width bins.
pub fn histogram_svg(title: &str, values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = min_max(values);
    let mut out = String::new();
    header(&mut out, title);
    if !lo.is_finite() {
        out.push_str("</svg>\n");
        return out;
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let bar_w = (W - 2.0 * PAD) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = c as f64 / top.max(1.0) * (H - 2.0 * PAD);
        let _ = write!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue" stroke="white"/>"#,
            PAD + i as f64 * bar_w,
            H - PAD - h,
            bar_w,
            h
        );
    }
    let _ = write!(
        out,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">{:.4}</text>"#,
        H - PAD + 16.0,
        lo
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.4}</text>"#,
        W - PAD,
        H - PAD + 16.0,
        hi
    );
    out.push_str("</svg>\n");
    out
}
