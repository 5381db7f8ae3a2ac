//! Static SVG line charts of curve CSVs.
//!
//! The x axis is the `k` column when there is one, else the first column.
//! The y column is `total`, then `mse`, then
//! the last column unless named explicitly. Every other column whose values
//! are not all numeric labels a series; a series is one polyline.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub x_name: String,
    pub y_name: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        row: line,
        msg: msg.into(),
    }
}

pub fn parse_curve_csv(text: &str, y_column: Option<&str>) -> Result<CurveTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cells: Vec<String> = rec.iter().map(str::to_string).collect();
        if cells.iter().all(String::is_empty) {
            continue;
        }
        match &header {
            None => header = Some(cells),
            Some(h) if h.len() != cells.len() => {
                return Err(Error::RaggedRow {
                    row: line,
                    expected: h.len(),
                    found: cells.len(),
                })
            }
            Some(_) => rows.push((line, cells)),
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "curve file has no header"))?;
    if header.len() < 2 {
        return Err(parse_err(1, "curve file needs at least two columns"));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "curve file has no data rows"));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let x_idx = col("k").unwrap_or(0);
    let y_idx = match y_column {
        Some(name) => col(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        None => col("total").or_else(|| col("mse")).unwrap_or(header.len() - 1),
    };
    if y_idx == x_idx {
        return Err(Error::InvalidConfig("the y column cannot be the x column".into()));
    }
    let categorical: Vec<usize> = (0..header.len())
        .filter(|&c| c != x_idx && c != y_idx)
        .filter(|&c| rows.iter().any(|(_, r)| r[c].parse::<f64>().is_err()))
        .collect();

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (line, r) in &rows {
        let x: f64 = r[x_idx]
            .parse()
            .map_err(|_| parse_err(*line, format!("non-numeric x value `{}`", r[x_idx])))?;
        if r[y_idx].is_empty() {
            continue;
        }
        let y: f64 = r[y_idx]
            .parse()
            .map_err(|_| parse_err(*line, format!("non-numeric y value `{}`", r[y_idx])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite { row: *line, col: 0 });
        }
        let key = if categorical.is_empty() {
            header[y_idx].clone()
        } else {
            categorical.iter().map(|&c| r[c].as_str()).collect::<Vec<_>>().join("/")
        };
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((key, vec![(x, y)])),
        }
    }
    if series.is_empty() {
        return Err(parse_err(1, "curve file has no plottable points"));
    }
    Ok(CurveTable {
        x_name: header[x_idx].clone(),
        y_name: header[y_idx].clone(),
        series,
    })
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `table` as an SVG 1.1 document. `comment` is placed in an XML
/// comment at the top.
pub fn render_svg(table: &CurveTable, comment: Option<&str>) -> String {
    let pts = || table.series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = span(pts().map(|p| p.0));
    let (y0, y1) = span(pts().map(|p| p.1));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    if let Some(c) = comment {
        let _ = writeln!(s, "<!-- {} -->", c.replace("--", "- -"));
    }
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let (left, right) = (MARGIN_LEFT, MARGIN_LEFT + plot_w);
    let (top, bottom) = (MARGIN_Y, MARGIN_Y + plot_h);
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"black\" points=\"{left:.2},{top:.2} {left:.2},{bottom:.2} {right:.2},{bottom:.2}\"/>"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            sx(xv),
            bottom + 14.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            left - 4.0,
            sy(yv) + 3.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (left + right) / 2.0,
        HEIGHT - 6.0,
        esc(&table.x_name)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        esc(&table.y_name)
    );
    for (i, (name, points)) in table.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            right + 10.0,
            right + 28.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            right + 32.0,
            ly + 4.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "# manifest x\nk,region,mse\n1,few,3\n2,few,2\n1,many,1\n2,many,0.5\n";

    #[test]
    fn two_series_two_polylines() {
        let t = parse_curve_csv(TWO, None).unwrap();
        assert_eq!(t.series.len(), 2);
        let svg = render_svg(&t, None);
        // one axis polyline plus one per series
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains(">few<") && svg.contains(">many<"));
    }

    #[test]
    fn deterministic_output() {
        let t = parse_curve_csv(TWO, None).unwrap();
        assert_eq!(render_svg(&t, Some("m")), render_svg(&t, Some("m")));
    }

    #[test]
    fn empty_and_malformed() {
        assert!(parse_curve_csv("k,mse\n", None).is_err());
        match parse_curve_csv("k,mse\n1,2\nx,3\n", None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_curve_csv("k,mse\n1,2,3\n", None),
            Err(Error::RaggedRow { .. })
        ));
    }

    #[test]
    fn k_column_is_x_anywhere() {
        let t = parse_curve_csv("region,query_label,k,total\nfew,1.5,1,3\nfew,1.5,2,2\nmany,9,1,1\n", None).unwrap();
        assert_eq!(t.x_name, "k");
        assert_eq!(t.series.len(), 2);
        assert_eq!(t.series[0].1, vec![(1.0, 3.0), (2.0, 2.0)]);
    }

    #[test]
    fn explicit_y_column() {
        let t = parse_curve_csv("k,region,bias2,total\n1,few,0.5,2\n", Some("bias2")).unwrap();
        assert_eq!(t.y_name, "bias2");
        assert_eq!(t.series[0].1, vec![(1.0, 0.5)]);
        assert!(parse_curve_csv("k,total\n1,2\n", Some("nope")).is_err());
    }
}
