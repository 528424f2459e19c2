//! Standalone SVG learning curves: median lines over interquartile bands.

use std::fmt::Write as _;
use std::path::Path;

use super::suite::{aggregate, read_aggregate_csv, read_run_csv, AggregateRow, AGGREGATE_COLUMNS};
use crate::agent::RunRecord;
use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 190.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const BASELINE_PALETTE: [&str; 3] = ["#555555", "#8c564b", "#bcbd22"];

/// One curve: per-episode median with a band from `lower` to `upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Series {
    pub fn from_aggregate(label: impl Into<String>, rows: &[AggregateRow]) -> Self {
        Self {
            label: label.into(),
            median: rows.iter().map(|r| r.median).collect(),
            lower: rows.iter().map(|r| r.q25).collect(),
            upper: rows.iter().map(|r| r.q75).collect(),
        }
    }

    /// A single run: the band collapses onto the line.
    pub fn from_returns(label: impl Into<String>, returns: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            lower: returns.clone(),
            upper: returns.clone(),
            median: returns,
        }
    }

    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }
}

/// Loads a curve from an aggregate CSV, a single run CSV, or a directory.
/// A directory contributes its `aggregate.csv` when present, otherwise every
/// run CSV inside it is aggregated as one seed each.
pub fn load_series(path: &Path) -> Result<Series> {
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if path.is_dir() {
        let agg = path.join("aggregate.csv");
        if agg.is_file() {
            return Ok(Series::from_aggregate(label, &read_aggregate_csv(&agg)?));
        }
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
        files.sort();
        if files.is_empty() {
            return Err(Error::Plot(format!("{} holds no CSV files", path.display())));
        }
        let records = files
            .iter()
            .enumerate()
            .map(|(i, f)| {
                Ok(RunRecord {
                    seed: i as u64,
                    rows: read_run_csv(f)?,
                    insertions: 0,
                    refit_count: 0,
                    complete: true,
                    error: None,
                    buffer: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Series::from_aggregate(label, &aggregate(&records).rows));
    }
    let header = csv::Reader::from_path(path)?.headers()?.clone();
    if header.iter().eq(AGGREGATE_COLUMNS) {
        Ok(Series::from_aggregate(label, &read_aggregate_csv(path)?))
    } else {
        let rows = read_run_csv(path)?;
        Ok(Series::from_returns(label, rows.iter().map(|r| r.shaped_return).collect()))
    }
}

/// Renders all series on a shared episode axis. Baselines are drawn dashed
/// and labelled as such. Every series must cover the same number of episodes.
pub fn plot_curves(series: &[Series], baselines: &[Series]) -> Result<String> {
    let all: Vec<&Series> = series.iter().chain(baselines).collect();
    let Some(first) = all.first() else {
        return Err(Error::Plot("nothing to plot".into()));
    };
    let n = first.len();
    if n == 0 {
        return Err(Error::Plot(format!("series `{}` is empty", first.label)));
    }
    for s in &all {
        if s.len() != n || s.lower.len() != n || s.upper.len() != n {
            return Err(Error::Plot(format!(
                "series `{}` has {} episodes, expected {n}",
                s.label,
                s.len()
            )));
        }
        let values = s.median.iter().chain(&s.lower).chain(&s.upper);
        if values.clone().any(|v| !v.is_finite()) {
            return Err(Error::Plot(format!("series `{}` has non-finite values", s.label)));
        }
    }

    let values = || all.iter().flat_map(|s| s.lower.iter().chain(&s.upper).chain(&s.median));
    let mut lo = values().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x = |i: usize| {
        let span = (n.max(2) - 1) as f64;
        MARGIN_LEFT + plot_w * i as f64 / span
    };
    let y = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str(
        "<style>text{font-family:sans-serif;font-size:12px;fill:#222}\
         .axis{stroke:#222;stroke-width:1}.grid{stroke:#ddd;stroke-width:1}\
         .line{fill:none;stroke-width:1.8}.band{stroke:none;fill-opacity:0.2}\
         .baseline{stroke-dasharray:6 4}</style>\n",
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let py = y(v);
        let _ = writeln!(
            svg,
            r#"<line class="grid" x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            py + 4.0,
            tick_label(v)
        );
    }
    for t in 0..=5 {
        let i = ((n - 1) as f64 * t as f64 / 5.0).round() as usize;
        let px = x(i);
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h + 18.0,
            i + 1
        );
    }
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}"/><line class="axis" x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{0:.2}"/>"#,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text><text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">shaped return</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        MARGIN_TOP + plot_h / 2.0
    );

    let styled = series
        .iter()
        .enumerate()
        .map(|(i, s)| (s, PALETTE[i % PALETTE.len()], false))
        .chain(
            baselines
                .iter()
                .enumerate()
                .map(|(i, s)| (s, BASELINE_PALETTE[i % BASELINE_PALETTE.len()], true)),
        );
    for (k, (s, colour, is_baseline)) in styled.enumerate() {
        let upper: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", x(i), y(s.upper[i]))).collect();
        let lower: Vec<String> = (0..n).rev().map(|i| format!("{:.2},{:.2}", x(i), y(s.lower[i]))).collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" fill="{colour}" points="{} {}"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", x(i), y(s.median[i]))).collect();
        let class = if is_baseline { "line baseline" } else { "line" };
        let _ = writeln!(
            svg,
            r#"<polyline class="{class}" stroke="{colour}" points="{}"/>"#,
            line.join(" ")
        );

        let ly = MARGIN_TOP + 10.0 + 20.0 * k as f64;
        let lx = MARGIN_LEFT + plot_w + 15.0;
        let label = if is_baseline {
            format!("{} (baseline)", s.label)
        } else {
            s.label.clone()
        };
        let _ = writeln!(
            svg,
            r#"<line class="{class}" stroke="{colour}" x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
