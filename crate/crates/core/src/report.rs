//! CSV tables and deterministic SVG charts.
//!
//! ```
//! use clever::report::{parse_csv, render_svg, ChartKind};
//!
//! let t = parse_csv("rho,acc\n0.5,0.61\n0.8,0.7\n").unwrap();
//! let a = render_svg(&t, ChartKind::Line, "ablation").unwrap();
//! assert!(a.starts_with("<svg"));
//! assert_eq!(a, render_svg(&t, ChartKind::Line, "ablation").unwrap());
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A parsed CSV file: header plus string cells. `lines[i]` is the 1-based
/// line number row `i` came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl Table {
    /// Parses column `col` as numbers; `inf`, `-inf` and `NaN` are accepted.
    pub fn numeric_column(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(row, line)| {
                row[col].trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "line {line}: column {:?} holds {:?}, not a number",
                        self.header[col], row[col]
                    ))
                })
            })
            .collect()
    }

    fn is_numeric(&self, col: usize) -> bool {
        self.numeric_column(col).is_ok()
    }
}

pub fn parse_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("line {}: {e}", line_of(&e).max(1))))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Format("line 1: empty header".into()));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let detail = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            Error::Format(format!("line {}: {detail}", line_of(&e)))
        })?;
        lines.push(rec.position().map_or(0, |p| p.line()));
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows, lines })
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    Bar,
}

impl FromStr for ChartKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(ChartKind::Line),
            "bar" => Ok(ChartKind::Bar),
            _ => Err(Error::config("chart", format!("unknown chart kind {s:?}; expected line or bar"))),
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| Some(acc.map_or((v, v), |(a, b): (f64, f64)| (a.min(v), b.max(v)))))
}

fn axes(svg: &mut String, f: &Frame, title: &str, x_label: &str, y_ticks: bool) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        (l + r) / 2.0,
        escape(title)
    );
    let _ = writeln!(svg, "<line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>");
    let _ = writeln!(svg, "<line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        (l + r) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    if y_ticks {
        for i in 0..=4 {
            let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
            let y = f.py(v);
            let _ = writeln!(
                svg,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{l:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
                l - 4.0,
                l - 6.0,
                y + 3.5,
                fmt_tick(v)
            );
        }
    }
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 14.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{}\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

/// Renders a table as a standalone SVG. The first column is the x axis
/// (line) or the category (bar); every other fully numeric column becomes
/// a series named by its header.
pub fn render_svg(table: &Table, kind: ChartKind, title: &str) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::Format("the table has no data rows".into()));
    }
    let series: Vec<usize> = (1..table.header.len()).filter(|&c| table.is_numeric(c)).collect();
    if series.is_empty() {
        return Err(Error::Format("no numeric column to plot besides the first".into()));
    }
    let values: Vec<Vec<f64>> = series
        .iter()
        .map(|&c| table.numeric_column(c))
        .collect::<Result<_>>()?;
    let names: Vec<&str> = series.iter().map(|&c| table.header[c].as_str()).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (lo, hi) = finite_range(values.iter().flatten().copied()).unwrap_or((0.0, 1.0));
    match kind {
        ChartKind::Line => {
            let xs = table.numeric_column(0)?;
            let (x0, x1) = padded(
                finite_range(xs.iter().copied())
                    .ok_or_else(|| Error::Format("the x column has no finite value".into()))?
                    .0,
                finite_range(xs.iter().copied()).map_or(1.0, |r| r.1),
            );
            let (y0, y1) = padded(lo, hi);
            let f = Frame { x0, x1, y0, y1 };
            axes(&mut svg, &f, title, &table.header[0], true);
            for i in 0..=4 {
                let v = x0 + (x1 - x0) * i as f64 / 4.0;
                let _ = writeln!(
                    svg,
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                    f.px(v),
                    HEIGHT - BOTTOM + 14.0,
                    fmt_tick(v)
                );
            }
            for (k, ys) in values.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let pts: Vec<String> = xs
                    .iter()
                    .zip(ys)
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
                    .collect();
                if pts.len() > 1 {
                    let _ = writeln!(
                        svg,
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                        pts.join(" ")
                    );
                }
                for p in &pts {
                    let (cx, cy) = p.split_once(',').expect("formatted pair");
                    let _ = writeln!(svg, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"2.5\" fill=\"{color}\"/>");
                }
            }
        }
        ChartKind::Bar => {
            let (y0, y1) = padded(lo.min(0.0), hi.max(0.0));
            let n = table.rows.len() as f64;
            let f = Frame {
                x0: 0.0,
                x1: n,
                y0,
                y1,
            };
            axes(&mut svg, &f, title, &table.header[0], true);
            let group = (WIDTH - LEFT - RIGHT) / n;
            let bar = group * 0.8 / values.len() as f64;
            for (r, row) in table.rows.iter().enumerate() {
                let gx = LEFT + group * r as f64;
                let _ = writeln!(
                    svg,
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                    gx + group / 2.0,
                    HEIGHT - BOTTOM + 14.0,
                    escape(&row[0])
                );
                for (k, ys) in values.iter().enumerate() {
                    let v = ys[r];
                    if !v.is_finite() {
                        continue;
                    }
                    let (top, bottom) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
                    let _ = writeln!(
                        svg,
                        "<rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{bar:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                        gx + group * 0.1 + bar * k as f64,
                        bottom - top,
                        PALETTE[k % PALETTE.len()]
                    );
                }
            }
        }
    }
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads `csv_path` and writes the chart to `out`.
pub fn emit_report(csv_path: &Path, kind: ChartKind, out: &Path) -> Result<()> {
    let table = read_csv(csv_path)?;
    let title = csv_path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let svg = render_svg(&table, kind, &title)?;
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}
