//! Minimal SVG plots (no timestamps, fixed number formatting).

use std::fmt::Write;

use ob_core::spectral::{Method, SpectrumRecord};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if !(x1 > x0) {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        let (dx, dy) = (0.05 * (x1 - x0), 0.05 * (y1 - y0));
        Frame { x0: x0 - dx, x1: x1 + dx, y0: y0 - dy, y1: y1 + dy }
    }
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }
    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn header(s: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#, H / 2.0, H / 2.0);
    for (v, anchor) in [(f.x0, "start"), (f.x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, f.px(v), H - PAD + 15.0);
    }
    for v in [f.y0, f.y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3e}</text>"#, PAD - 4.0, f.py(v) + 4.0);
    }
    if f.y0 < 0.0 && f.y1 > 0.0 {
        let _ = writeln!(s, r##"<line x1="{PAD}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#999" stroke-dasharray="4 3"/>"##, W - PAD, y = f.py(0.0));
    }
}

/// `k` against `Re λ`; kernel wavenumbers in red, pencil values as rings.
pub fn spectrum_svg(records: &[SpectrumRecord]) -> String {
    let pts: Vec<(f64, f64, &SpectrumRecord)> = records.iter().filter_map(|r| r.lambda.map(|l| (r.k as f64, l.re, r))).collect();
    let f = Frame::fit(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1));
    let mut s = String::new();
    header(&mut s, "spectrum", "k", "Re λ", &f);
    for (k, re, r) in &pts {
        let color = if r.in_kernel_set { "#c0392b" } else { "#2c3e50" };
        let (fill, rad) = match r.method {
            Method::Pencil => ("none", 5.0),
            _ => (color, 3.0),
        };
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{rad}" fill="{fill}" stroke="{color}"/>"#, f.px(*k), f.py(*re));
    }
    s.push_str("</svg>\n");
    s
}

/// `(Y_a, Y_b)` projection (0-based axes) of several orbits.
pub fn phase_svg(title: &str, axes: (usize, usize), orbits: &[(&str, &[Vec<f64>])]) -> String {
    let (a, b) = axes;
    let coord = move |x: &Vec<f64>, i: usize| x.get(i).copied().unwrap_or(0.0);
    let all = orbits.iter().flat_map(|(_, o)| o.iter());
    let f = Frame::fit(all.clone().map(move |x| coord(x, a)), all.map(move |x| coord(x, b)));
    let mut s = String::new();
    header(&mut s, title, &format!("Y_{}", a + 1), &format!("Y_{}", b + 1), &f);
    let colors = ["#2c3e50", "#c0392b", "#27ae60"];
    for (i, (name, o)) in orbits.iter().enumerate() {
        let mut d = String::new();
        for (j, x) in o.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, f.px(coord(x, a)), f.py(coord(x, b)));
        }
        let c = colors[i % colors.len()];
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1"/>"#, d.trim_end());
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, W - PAD - 100.0, PAD + 15.0 * (i as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}
