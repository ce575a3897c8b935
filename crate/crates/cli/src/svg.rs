//! Standalone SVG precision-recall plot.

use std::fmt::Write as _;

/// Reads `threshold,recall,precision` rows and the trailing `AP,<v>` line.
/// `(recall, precision)` points and the AP line, if present.
pub type PrSeries = (Vec<(f64, f64)>, Option<f64>);

pub fn parse_pr_csv(text: &str) -> Result<PrSeries, String> {
    let mut points = Vec::new();
    let mut ap = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("threshold")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("line {}: bad number `{s}`", n + 1));
        match fields.as_slice() {
            ["AP", v] => ap = Some(num(v)?),
            [_, r, p] => points.push((num(r)?, num(p)?)),
            _ => return Err(format!("line {}: expected 3 fields", n + 1)),
        }
    }
    Ok((points, ap))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Recall on x, precision on y, both in [0, 1].
pub fn render(points: &[(f64, f64)], ap: Option<f64>, title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const T: f64 = 40.0;
    const PW: f64 = 380.0;
    const PH: f64 = 300.0;
    let x = |r: f64| L + r.clamp(0.0, 1.0) * PW;
    let y = |p: f64| T + (1.0 - p.clamp(0.0, 1.0)) * PH;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let label = match ap {
        Some(v) => format!("{} (AP {v:.4})", escape(title)),
        None => escape(title),
    };
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{label}</text>"#, L + PW / 2.0);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{0}" x2="{1}" y2="{0}" stroke="#ddd"/><text x="{2}" y="{3}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            L + PW,
            L - 6.0,
            y(v) + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{0}" y1="{T}" x2="{0}" y2="{1}" stroke="#ddd"/><text x="{0}" y="{2}" text-anchor="middle">{v:.1}</text>"##,
            x(v),
            T + PH,
            T + PH + 16.0
        );
    }
    let _ = writeln!(s, r#"<rect x="{L}" y="{T}" width="{PW}" height="{PH}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, L + PW / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">precision</text>"#,
        T + PH / 2.0
    );
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(r, p)| format!("{:.2},{:.2}", x(r), y(p))).collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}
