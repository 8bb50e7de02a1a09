use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::table::{ResultRow, ResultTable};

/// One line: `(x, mean, std)` points sorted by `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// Groups rows by strategy and averages `metric` over seeds at each `x`.
pub fn series_from(table: &ResultTable, metric: &str, x_of: impl Fn(&ResultRow) -> Option<f64>) -> Vec<Series> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in &table.rows {
        if let (Some(x), Some(v)) = (x_of(r), r.get(metric)) {
            acc.entry(r.strategy.clone())
                .or_default()
                .entry(x.to_bits())
                .or_insert((x, Vec::new()))
                .1
                .push(v);
        }
    }
    acc.into_iter()
        .map(|(name, by_x)| {
            let mut points: Vec<(f64, f64, f64)> = by_x
                .into_values()
                .map(|(x, vs)| {
                    let n = vs.len() as f64;
                    let m = vs.iter().sum::<f64>() / n;
                    let var = if vs.len() > 1 {
                        vs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    (x, m, var.sqrt())
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 55.0;

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

/// Line chart with ±1 std whiskers.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let margin = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - margin, y1 + margin);
    let px = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let py = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        escape(title)
    )
    .unwrap();
    let (bx, by) = (PAD_L, H - PAD_B);
    writeln!(
        s,
        r#"<path d="M{bx},{PAD_T} L{bx},{by} L{},{by}" stroke="black" fill="none"/>"#,
        W - PAD_R
    )
    .unwrap();
    for t in ticks(x0, x1) {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(t),
            by + 18.0,
            short(t)
        )
        .unwrap();
    }
    for t in ticks(y0, y1) {
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            bx - 6.0,
            py(t) + 4.0,
            short(t)
        )
        .unwrap();
        writeln!(
            s,
            r##"<path d="M{bx},{0:.1} L{1},{0:.1}" stroke="#ddd"/>"##,
            py(t),
            W - PAD_R
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 15.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(18,{0}) rotate(-90)" text-anchor="middle">{1}</text>"#,
        (PAD_T + H - PAD_B) / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (k, ser) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(i, &(x, m, _))| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, px(x), py(m)))
            .collect();
        writeln!(
            s,
            r#"<path d="{}" stroke="{c}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        )
        .unwrap();
        for &(x, m, sd) in &ser.points {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(m)).unwrap();
            if sd > 0.0 {
                writeln!(
                    s,
                    r#"<path d="M{0:.1},{1:.1} L{0:.1},{2:.1}" stroke="{c}"/>"#,
                    px(x),
                    py(m - sd),
                    py(m + sd)
                )
                .unwrap();
            }
        }
        let ly = PAD_T + 10.0 + 18.0 * k as f64;
        writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{c}"/>"#,
            W - PAD_R + 12.0,
            ly - 4.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{ly}">{}</text>"#,
            W - PAD_R + 30.0,
            escape(&ser.name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_average_over_seeds() {
        let mk = |g: f64, seed: u64, fd: f64| ResultRow {
            experiment: "ablate-gamma".into(),
            strategy: "distribution".into(),
            gamma: g,
            batch_size: 100,
            setting: String::new(),
            seed,
            values: vec![("fd".into(), fd)],
        };
        let t = ResultTable::new(vec![mk(500.0, 0, 0.1), mk(0.0, 0, 0.2), mk(500.0, 1, 0.3)]);
        let s = series_from(&t, "fd", |r| Some(r.gamma));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points[0], (0.0, 0.2, 0.0));
        assert!((s[0].points[1].1 - 0.2).abs() < 1e-15);
        let svg = line_chart_svg("FD vs γ", "γ", "FD", &s);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
