//! Minimal SVG line plots for audit distributions and ROC/PR curves.

use std::fmt::Write;

const W: f64 = 420.0;
const H: f64 = 320.0;
const M: (f64, f64, f64, f64) = (50.0, 20.0, 30.0, 45.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x.0) / (self.x.1 - self.x.0).max(1e-12);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0).max(1e-12);
        (M.0 + fx * (W - M.0 - M.1), H - M.3 - fy * (H - M.2 - M.3))
    }
}

/// Renders labelled polylines on shared axes.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    x_range: (f64, f64),
    y_range: (f64, f64),
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let f = Frame { x: x_range, y: y_range };
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0) = f.px(x_range.0, y_range.0);
    let (x1, y1) = f.px(x_range.1, y_range.1);
    let _ = write!(s, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x_range.0 + t * (x_range.1 - x_range.0);
        let yv = y_range.0 + t * (y_range.1 - y_range.0);
        let (px, _) = f.px(xv, y_range.0);
        let (_, py) = f.px(x_range.0, yv);
        let _ = write!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{xv:.2}</text>"#, y0 + 14.0);
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{yv:.2}</text>"#, x0 - 4.0, py + 4.0);
    }
    let _ = write!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 8.0, escape(x_label));
    let _ = write!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                let (a, b) = f.px(x, y);
                format!("{a:.1},{b:.1}")
            })
            .collect();
        let _ = write!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, path.join(" "));
        let ly = y1 + 14.0 + 14.0 * k as f64;
        let _ = write!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 - 120.0, x1 - 104.0);
        let _ = write!(s, r#"<text x="{}" y="{}">{}</text>"#, x1 - 100.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Gaussian kernel density estimate on `grid` with Silverman's bandwidth.
pub fn kde(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return vec![0.0; grid.len()];
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| samples.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Density overlay of several sample sets, e.g. SvR / RvR / SvS.
pub fn distribution_plot(title: &str, x_label: &str, sets: &[(&str, &[f64])]) -> String {
    let all = sets.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo - 0.02, hi + 0.02) } else { (0.0, 1.0) };
    let grid: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
    let series: Vec<(String, Vec<(f64, f64)>)> = sets
        .iter()
        .map(|(name, v)| (name.to_string(), grid.iter().copied().zip(kde(v, &grid)).collect()))
        .collect();
    let ymax = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(0.0, f64::max)
        .max(1e-9);
    line_plot(title, x_label, "density", (lo, hi), (0.0, ymax * 1.05), &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_integrates_to_one() {
        let grid: Vec<f64> = (0..2001).map(|i| -5.0 + i as f64 * 0.005).collect();
        let d = kde(&[0.1, 0.5, -0.3, 0.2], &grid);
        let area: f64 = d.iter().sum::<f64>() * 0.005;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn svg_is_well_formed() {
        let s = distribution_plot("a <b>", "r", &[("SvR", &[0.5, 0.6]), ("RvR", &[0.7, 0.8])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt;b&gt;"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
