//! Static SVG country plots: posterior band, covariate-only band and data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Definition;
use crate::error::{Error, Result};
use crate::estimate::{EstimateRow, EstimateTable};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

const ESTIMATE_COLOR: &str = "#c0392b";
const COVARIATE_COLOR: &str = "#2e8b57";
const EXCLUDED_COLOR: &str = "#8c8c8c";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    /// On the reference scale, with a 95% error bar.
    Adjusted,
    /// As reported under a non-reference definition.
    Unadjusted,
    /// Removed by the ratio screen.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub country: String,
    pub year: i32,
    pub sbr: f64,
    pub lower: f64,
    pub upper: f64,
    pub definition: Definition,
    pub kind: PointKind,
}

fn definition_color(d: Definition) -> &'static str {
    match d {
        Definition::Ge28Weeks => "#1f4e79",
        Definition::Ge24Weeks => "#7570b3",
        Definition::Ge22Weeks => "#d95f02",
        Definition::Ge1000g => "#e7298a",
        Definition::Ge500g => "#a6761d",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.0 {
        2.0
    } else if f < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

struct Frame {
    x0: f64,
    x1: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, year: f64) -> f64 {
        LEFT + (year - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - v / self.y1 * (HEIGHT - TOP - BOTTOM)
    }
}

fn band_path(frame: &Frame, rows: &[&EstimateRow], pick: impl Fn(&EstimateRow) -> (f64, f64)) -> String {
    let mut d = String::new();
    for (i, r) in rows.iter().enumerate() {
        let (lo, _) = pick(r);
        let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, frame.x(r.year as f64), frame.y(lo));
    }
    for r in rows.iter().rev() {
        let (_, hi) = pick(r);
        let _ = write!(d, "L{:.2},{:.2} ", frame.x(r.year as f64), frame.y(hi));
    }
    d.push('Z');
    d
}

fn line_path(frame: &Frame, rows: &[&EstimateRow], pick: impl Fn(&EstimateRow) -> f64) -> String {
    rows.iter()
        .enumerate()
        .map(|(i, r)| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, frame.x(r.year as f64), frame.y(pick(r))))
        .collect::<Vec<_>>()
        .join(" ")
}

/// SVG document for one country.
pub fn country_svg(country: &str, rows: &[&EstimateRow], points: &[PlotPoint]) -> String {
    let (x0, x1) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => (a.year as f64 - 0.5, b.year as f64 + 0.5),
        _ => (0.0, 1.0),
    };
    let top = rows
        .iter()
        .flat_map(|r| [r.estimate.upper, r.covariate_only.upper])
        .chain(points.iter().map(|p| p.upper.max(p.sbr)))
        .fold(1.0, f64::max);
    let step = nice_step(top * 1.05);
    let y1 = (top * 1.05 / step).ceil() * step;
    let frame = Frame { x0, x1, y1 };
    let plot_right = WIDTH - RIGHT;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="24" font-size="16" font-weight="bold">{}</text>"#, escape(country));

    // axes and grid
    let mut v = 0.0;
    while v <= y1 + 1e-9 {
        let y = frame.y(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{plot_right}" y2="{y:.2}" stroke="#e5e5e5"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, trim_number(v));
        v += step;
    }
    if !rows.is_empty() {
        let span = (x1 - x0).round() as i32;
        let every = if span > 12 { 5 } else if span > 6 { 2 } else { 1 };
        for r in rows.iter().filter(|r| r.year % every == 0) {
            let x = frame.x(r.year as f64);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/>"##, HEIGHT - BOTTOM, HEIGHT - BOTTOM + 5.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, HEIGHT - BOTTOM + 18.0, r.year);
        }
    }
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{:.2}" x2="{plot_right}" y2="{:.2}" stroke="#444"/>"##, HEIGHT - BOTTOM, HEIGHT - BOTTOM);
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="#444"/>"##, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">Stillbirths per 1000 total births</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0
    );

    if !rows.is_empty() {
        let cov = band_path(&frame, rows, |r| (r.covariate_only.lower, r.covariate_only.upper));
        let _ = writeln!(s, r#"<path d="{cov}" fill="{COVARIATE_COLOR}" fill-opacity="0.15" stroke="none"/>"#);
        let est = band_path(&frame, rows, |r| (r.estimate.lower, r.estimate.upper));
        let _ = writeln!(s, r#"<path d="{est}" fill="{ESTIMATE_COLOR}" fill-opacity="0.2" stroke="none"/>"#);
        let cov_line = line_path(&frame, rows, |r| r.covariate_only.median);
        let _ = writeln!(s, r#"<path d="{cov_line}" fill="none" stroke="{COVARIATE_COLOR}" stroke-width="2" stroke-dasharray="6,4"/>"#);
        let est_line = line_path(&frame, rows, |r| r.estimate.median);
        let _ = writeln!(s, r#"<path d="{est_line}" fill="none" stroke="{ESTIMATE_COLOR}" stroke-width="2.5"/>"#);
    }

    for p in points {
        let x = frame.x(p.year as f64);
        let y = frame.y(p.sbr);
        let color = definition_color(p.definition);
        match p.kind {
            PointKind::Adjusted => {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.2"/>"#,
                    frame.y(p.lower),
                    frame.y(p.upper)
                );
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
            }
            PointKind::Unadjusted => {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
            }
            PointKind::Excluded => {
                let _ = writeln!(s, "{}", cross(x, y));
            }
        }
    }

    legend(&mut s, points);
    s.push_str("</svg>\n");
    s
}

fn trim_number(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

fn cross(x: f64, y: f64) -> String {
    format!(
        r#"<path d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="{EXCLUDED_COLOR}" stroke-width="1.5"/>"#,
        x - 4.0,
        y - 4.0,
        x + 4.0,
        y + 4.0,
        x - 4.0,
        y + 4.0,
        x + 4.0,
        y - 4.0
    )
}

type Marker = Box<dyn Fn(f64, f64) -> String>;

fn legend(s: &mut String, points: &[PlotPoint]) {
    let mut items: Vec<(Marker, String)> = vec![
        (
            Box::new(|x, y| format!(r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{ESTIMATE_COLOR}" stroke-width="2.5"/>"#, x + 20.0)),
            "Estimate, 90% interval".into(),
        ),
        (
            Box::new(|x, y| {
                format!(r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{COVARIATE_COLOR}" stroke-width="2" stroke-dasharray="6,4"/>"#, x + 20.0)
            }),
            "Covariate-based".into(),
        ),
    ];
    for d in Definition::ALL {
        if points.iter().any(|p| p.definition == d && p.kind != PointKind::Excluded) {
            let c = definition_color(d);
            items.push((Box::new(move |x, y| format!(r#"<circle cx="{}" cy="{y}" r="4" fill="{c}"/>"#, x + 10.0)), d.as_str().into()));
        }
    }
    if points.iter().any(|p| p.kind == PointKind::Unadjusted) {
        items.push((
            Box::new(|x, y| format!(r##"<circle cx="{}" cy="{y}" r="4" fill="none" stroke="#333" stroke-width="1.5"/>"##, x + 10.0)),
            "Unadjusted".into(),
        ));
    }
    if points.iter().any(|p| p.kind == PointKind::Excluded) {
        items.push((Box::new(|x, y| cross(x + 10.0, y)), "Excluded".into()));
    }
    let x = WIDTH - RIGHT + 16.0;
    for (i, (mark, label)) in items.iter().enumerate() {
        let y = TOP + 8.0 + 20.0 * i as f64;
        let _ = writeln!(s, "{}", mark(x, y));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 26.0, y + 4.0, escape(label));
    }
}

/// Writes the plot of `country` to `out_path`.
pub fn emit_country_plot(country: &str, estimates: &EstimateTable, points: &[PlotPoint], out_path: &Path) -> Result<()> {
    let rows = estimates.for_country(country);
    if rows.is_empty() {
        return Err(Error::Data(format!("no estimates for country `{country}`")));
    }
    let own: Vec<PlotPoint> = points.iter().filter(|p| p.country == country).cloned().collect();
    let svg = country_svg(country, &rows, &own);
    std::fs::write(out_path, svg).map_err(|e| Error::io(out_path, e))
}

/// One SVG per country plus `index.html` in `dir`.
pub fn write_plots(dir: &Path, estimates: &EstimateTable, points: &[PlotPoint]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let countries = estimates.countries();
    for c in &countries {
        let path = dir.join(format!("{}.svg", file_stem(c)));
        emit_country_plot(c, estimates, points, &path)?;
        written.push(path);
    }
    let mut html = String::from("<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>Stillbirth rate estimates</title></head>\n<body>\n<h1>Stillbirth rate estimates</h1>\n");
    for c in &countries {
        let _ = writeln!(html, "<h2 id=\"{0}\">{0}</h2>\n<img src=\"{1}.svg\" alt=\"{0}\">", escape(c), file_stem(c));
    }
    html.push_str("</body>\n</html>\n");
    let index = dir.join("index.html");
    std::fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    written.push(index);
    Ok(written)
}

fn file_stem(country: &str) -> String {
    country.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::Band;

    fn table(country: &str, level: f64) -> EstimateTable {
        EstimateTable {
            rows: (2000..2010)
                .map(|y| EstimateRow {
                    country: country.into(),
                    year: y,
                    estimate: Band { median: level, lower: level * 0.9, upper: level * 1.1 },
                    covariate_only: Band { median: level * 1.2, lower: level, upper: level * 1.5 },
                })
                .collect(),
        }
    }

    fn point(year: i32, sbr: f64, kind: PointKind) -> PlotPoint {
        PlotPoint { country: "AAA".into(), year, sbr, lower: sbr * 0.95, upper: sbr * 1.05, definition: Definition::Ge28Weeks, kind }
    }

    #[test]
    fn unknown_country_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_country_plot("ZZZ", &table("AAA", 10.0), &[], &dir.path().join("z.svg"));
        assert!(err.is_err());
    }

    #[test]
    fn bands_only_without_data() {
        let rows = table("AAA", 10.0);
        let svg = country_svg("AAA", &rows.for_country("AAA"), &[]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(ESTIMATE_COLOR) && svg.contains(COVARIATE_COLOR));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn markers_by_kind_and_deterministic_bytes() {
        let est = table("AAA", 12.0);
        let pts = vec![point(2001, 11.0, PointKind::Adjusted), point(2003, 14.0, PointKind::Unadjusted), point(2005, 4.0, PointKind::Excluded)];
        let a = country_svg("AAA", &est.for_country("AAA"), &pts);
        let b = country_svg("AAA", &est.for_country("AAA"), &pts);
        assert_eq!(a, b);
        assert!(a.contains(r##"fill="#1f4e79""##));
        assert!(a.contains(r##"fill="none" stroke="#1f4e79""##));
        assert!(a.contains(EXCLUDED_COLOR));
        let dir = tempfile::tempdir().unwrap();
        let files = write_plots(dir.path(), &est, &pts).unwrap();
        assert_eq!(files.len(), 2);
        let html = std::fs::read_to_string(dir.path().join("index.html")).unwrap();
        assert!(html.contains("AAA.svg"));
    }

    #[test]
    fn axis_steps() {
        assert_eq!(nice_step(50.0), 10.0);
        assert_eq!(nice_step(12.0), 2.0);
        assert_eq!(trim_number(2.5), "2.5");
        assert_eq!(trim_number(10.0), "10");
    }
}
