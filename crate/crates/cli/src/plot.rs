//! SVG line charts of CSV columns.

use std::fmt::Write as _;

use crate::{Failure, PlotArgs};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One named series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn run(a: PlotArgs) -> Result<(), Failure> {
    let mut rdr = csv::Reader::from_path(&a.input).map_err(|e| Failure::Usage(format!("{}: {e}", a.input.display())))?;
    let header: Vec<String> = rdr.headers().map_err(anyhow::Error::from)?.iter().map(str::to_string).collect();
    let rows: Vec<Vec<String>> = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(anyhow::Error::from)?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Failure::Usage(format!("no column `{name}` in {}", a.input.display())))
    };
    let xi = match &a.x {
        Some(x) => col(x)?,
        None => 0,
    };
    let numeric = |i: usize| rows.iter().all(|r| r.get(i).is_some_and(|v| v.is_empty() || v.parse::<f64>().is_ok()));
    let ys: Vec<usize> = if a.y.is_empty() {
        (0..header.len()).filter(|&i| i != xi && numeric(i)).collect()
    } else {
        a.y.iter().map(|n| col(n)).collect::<Result<_, _>>()?
    };
    if ys.is_empty() {
        return Err(Failure::Usage("no numeric columns to plot".into()));
    }
    let series: Vec<Series> = ys
        .iter()
        .map(|&yi| Series {
            name: header[yi].clone(),
            points: rows
                .iter()
                .filter_map(|r| Some((r.get(xi)?.parse().ok()?, r.get(yi)?.parse().ok()?)))
                .collect(),
        })
        .collect();
    let title = a.title.clone().unwrap_or_else(|| a.input.file_name().map_or_else(String::new, |f| f.to_string_lossy().into()));
    std::fs::write(&a.out, render(&title, &header[xi], &series))?;
    Ok(())
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Renders the series into a self-contained SVG document.
pub fn render(title: &str, x_label: &str, series: &[Series]) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), HEIGHT - MARGIN + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(yv) + 4.0, tick(yv));
        let _ = writeln!(s, r##"<line x1="{MARGIN}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, WIDTH - MARGIN, sy(yv), sy(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#, WIDTH - MARGIN - 6.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_emits_one_polyline_per_series() {
        let series = vec![
            Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
            Series { name: "b<c".into(), points: vec![(0.0, 3.0), (1.0, 3.0)] },
        ];
        let svg = render("t", "x", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn constant_series_gets_a_nonzero_extent() {
        assert_eq!(extent([2.0, 2.0].into_iter()), (1.5, 2.5));
    }
}
