//! Minimal SVG renderer: heatmaps, grouped bars and line plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Viridis-like ramp from dark blue to yellow.
fn ramp(u: f64) -> String {
    let u = u.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = u * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let c = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

/// `values` is row-major with `ny` rows (bottom to top) of `nx` cells.
pub fn heatmap(title: &str, nx: usize, ny: usize, values: &[f64], extent: [f64; 4]) -> String {
    let mut s = header(title);
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let side = (H - 2.0 * PAD).min(W - 2.0 * PAD - 80.0);
    let (cw, ch) = (side / nx as f64, side / ny as f64);
    for j in 0..ny {
        for i in 0..nx {
            let v = values[j * nx + i];
            let x = PAD + i as f64 * cw;
            let y = PAD + (ny - 1 - j) as f64 * ch;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                cw + 0.05,
                ch + 0.05,
                ramp((v - lo) / span)
            );
        }
    }
    let bx = PAD + side + 20.0;
    for k in 0..50 {
        let u = k as f64 / 49.0;
        let y = PAD + side * (1.0 - u) - side / 50.0;
        let _ = writeln!(s, r#"<rect x="{bx}" y="{y:.2}" width="16" height="{:.2}" fill="{}"/>"#, side / 50.0 + 0.5, ramp(u));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{hi:.3}</text>"#, bx + 20.0, PAD + 8.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{lo:.3}</text>"#, bx + 20.0, PAD + side);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">x ∈ [{}, {}], y ∈ [{}, {}]</text>"#,
        PAD + side / 2.0,
        PAD + side + 20.0,
        extent[0],
        extent[1],
        extent[2],
        extent[3]
    );
    s.push_str("</svg>\n");
    s
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn y_range(vals: impl Iterator<Item = f64>, log: bool) -> (f64, f64) {
    let v: Vec<f64> = vals.filter(|v| v.is_finite() && (!log || *v > 0.0)).map(|v| if log { v.log10() } else { v }).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = if log { lo } else { lo.min(0.0) };
    if hi > lo {
        (lo, hi + 0.05 * (hi - lo))
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (k, n) in names.iter().enumerate() {
        let y = PAD + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
            W - PAD - 110.0,
            y,
            PALETTE[k % PALETTE.len()],
            W - PAD - 95.0,
            y + 9.0,
            escape(n)
        );
    }
}

fn y_ticks(s: &mut String, lo: f64, hi: f64, log: bool) {
    for k in 0..=4 {
        let u = k as f64 / 4.0;
        let v = lo + u * (hi - lo);
        let y = H - PAD - u * (H - 2.0 * PAD);
        let label = if log { format!("{:.2e}", 10f64.powf(v)) } else { format!("{v:.3}") };
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{label}</text>"#, PAD - 4.0, y + 3.0);
    }
}

/// Line plot; `log_y` plots log₁₀ of positive values.
pub fn lines(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_y: bool) -> String {
    let mut s = header(title);
    axes(&mut s, xlabel, ylabel);
    let xs = series.iter().flat_map(|se| se.points.iter().map(|p| p.0));
    let xlo = xs.clone().fold(f64::INFINITY, f64::min);
    let xhi = xs.fold(f64::NEG_INFINITY, f64::max);
    let (xlo, xhi) = if xhi > xlo { (xlo, xhi) } else { (xlo - 0.5, xlo + 0.5) };
    let (ylo, yhi) = y_range(series.iter().flat_map(|se| se.points.iter().map(|p| p.1)), log_y);
    y_ticks(&mut s, ylo, yhi, log_y);
    let px = |x: f64| PAD + (x - xlo) / (xhi - xlo) * (W - 2.0 * PAD);
    let py = |y: f64| {
        let y = if log_y { y.log10() } else { y };
        H - PAD - (y - ylo) / (yhi - ylo) * (H - 2.0 * PAD)
    };
    for (k, se) in series.iter().enumerate() {
        let pts: Vec<String> = se
            .points
            .iter()
            .filter(|p| p.1.is_finite() && (!log_y || p.1 > 0.0))
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{c}"/>"#);
        }
    }
    for k in 0..=4 {
        let x = xlo + k as f64 / 4.0 * (xhi - xlo);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{x:.2}</text>"#, px(x), H - PAD + 14.0);
    }
    legend(&mut s, &series.iter().map(|se| se.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn grouped_bars(title: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)], log_y: bool) -> String {
    let mut s = header(title);
    axes(&mut s, "", ylabel);
    let (ylo, yhi) = y_range(series.iter().flat_map(|(_, v)| v.iter().copied()), log_y);
    y_ticks(&mut s, ylo, yhi, log_y);
    let group_w = (W - 2.0 * PAD) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let gx = PAD + g as f64 * group_w + group_w * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(f64::NAN);
            if !v.is_finite() || (log_y && v <= 0.0) {
                continue;
            }
            let yv = if log_y { v.log10() } else { v };
            let top = H - PAD - (yv - ylo) / (yhi - ylo) * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + k as f64 * bar_w,
                bar_w,
                (H - PAD - top).max(0.0),
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            H - PAD + 14.0,
            escape(cat)
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_closed_svg() {
        let h = heatmap("h", 2, 2, &[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 0.0, 1.0]);
        assert!(h.starts_with("<svg") && h.trim_end().ends_with("</svg>"));
        let l = lines(
            "l",
            "x",
            "y",
            &[Series {
                name: "a".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
            true,
        );
        assert!(l.contains("polyline"));
        let b = grouped_bars("b", "y", &["c".into()], &[("s".into(), vec![1.0])], false);
        assert!(b.contains("<rect"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
    }
}
