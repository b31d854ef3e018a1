//! Human-readable summaries and static SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::conformal::ScoreKind;
use crate::dataio::load_results;
use crate::error::{Error, Result};
use crate::evaluation::{curves, summarize, AblationSummaryRow, CurvePoint, StrategySummary};

fn stars_text(n: u8) -> String {
    "*".repeat(usize::from(n))
}

fn mean_sd(mean: f64, sd: f64, digits: usize) -> String {
    format!("{mean:.digits$} ± {sd:.digits$}")
}

/// Markdown table with α_opt, accuracy, the three workload columns and
/// significance stars, one row per `(score, strategy)`.
pub fn summary_table(summaries: &[StrategySummary]) -> String {
    let header = [
        "Score",
        "Strategy",
        "α_opt",
        "Accuracy (%)",
        "Queries",
        "Max queries/expert",
        "Avg queries/expert",
        "Sig.",
    ];
    let rows: Vec<[String; 8]> = summaries
        .iter()
        .map(|s| {
            let uses_experts = s.n_queries.mean > 0.0 || s.strategy.uses_expert_knowledge();
            let workload = |m: f64, sd: f64| {
                if uses_experts {
                    mean_sd(m, sd, 1)
                } else {
                    "-".into()
                }
            };
            [
                s.score.to_string(),
                s.strategy.as_str().into(),
                format!("{}", s.alpha_opt),
                mean_sd(100.0 * s.accuracy.mean, 100.0 * s.accuracy.sd, 2),
                workload(s.n_queries.mean, s.n_queries.sd),
                workload(s.max_qpe.mean, s.max_qpe.sd),
                s.avg_qpe.map_or("-".into(), |a| mean_sd(a.mean, a.sd, 1)),
                s.significance
                    .as_ref()
                    .map_or(String::new(), |v| stars_text(v.stars)),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header.map(String::from));
    out.push_str(&format!(
        "|{}|\n",
        widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    ));
    for row in &rows {
        out.push_str(&line(row));
    }
    out.push_str("\nStars: one-tailed paired test against the stronger of the model and the best expert, * p < 0.05, ** p < 0.01, *** p < 0.001, **** p < 0.0001.\n");
    out
}

/// Table of α_opt and accuracy per ablation parameter.
pub fn ablation_table(parameter: &str, rows: &[AblationSummaryRow]) -> String {
    let mut out = format!(
        "| {parameter} | Strategy | α_opt | Accuracy (%) | 95% CI |\n|---|---|---|---|---|\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | ± {:.2} |",
            r.parameter,
            r.strategy.as_str(),
            r.alpha_opt,
            mean_sd(100.0 * r.accuracy.mean, 100.0 * r.accuracy.sd, 2),
            100.0 * r.accuracy_ci95
        );
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error band, one half-width per point.
    pub band: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let (width, height) = (720.0, 440.0);
        let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
        let (pw, ph) = (width - left - right, height - top - bottom);

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                xs.push(x);
                let half = s.band.as_ref().map_or(0.0, |b| b[i]);
                ys.push(y - half);
                ys.push(y + half);
            }
        }
        let finite = |v: &Vec<f64>| {
            v.iter()
                .copied()
                .filter(|x| x.is_finite())
                .collect::<Vec<_>>()
        };
        let (xs, ys) = (finite(&xs), finite(&ys));
        let bounds = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = bounds(&xs);
        let (y0, y1) = bounds(&ys);
        let pad = (y1 - y0) * 0.05;
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            left + pw / 2.0,
            escape(&self.title)
        );
        for t in nice_ticks(x0, x1, 8) {
            let x = sx(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{}" stroke="#eeeeee"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
                top + ph,
                top + ph + 16.0,
                fmt_tick(t)
            );
        }
        for t in nice_ticks(y0, y1, 6) {
            let y = sy(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#eeeeee"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                left + pw,
                left - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            height - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64, f64)> = s
                .points
                .iter()
                .enumerate()
                .filter(|(_, (x, y))| x.is_finite() && y.is_finite())
                .map(|(k, &(x, y))| (x, y, s.band.as_ref().map_or(0.0, |b| b[k])))
                .collect();
            if pts.is_empty() {
                continue;
            }
            if s.band.is_some() {
                let upper = pts
                    .iter()
                    .map(|&(x, y, h)| format!("{:.2},{:.2}", sx(x), sy(y + h)));
                let lower = pts
                    .iter()
                    .rev()
                    .map(|&(x, y, h)| format!("{:.2},{:.2}", sx(x), sy(y - h)));
                let _ = writeln!(
                    svg,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                    upper.chain(lower).collect::<Vec<_>>().join(" ")
                );
            }
            let line: Vec<String> = pts
                .iter()
                .map(|&(x, y, _)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                line.join(" ")
            );
            if pts.len() == 1 {
                let (x, y, _) = pts[0];
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            let ly = top + 10.0 + 18.0 * i as f64;
            let lx = left + pw + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

/// Which workload column a plot shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadMetric {
    Queries,
    MaxPerExpert,
    AvgPerExpert,
}

impl WorkloadMetric {
    fn label(self) -> &'static str {
        match self {
            WorkloadMetric::Queries => "expert queries",
            WorkloadMetric::MaxPerExpert => "max queries per expert",
            WorkloadMetric::AvgPerExpert => "avg queries per queried expert",
        }
    }

    fn value(self, p: &CurvePoint) -> f64 {
        match self {
            WorkloadMetric::Queries => p.n_queries,
            WorkloadMetric::MaxPerExpert => p.max_qpe,
            WorkloadMetric::AvgPerExpert => p.avg_qpe.unwrap_or(f64::NAN),
        }
    }
}

fn by_strategy(
    points: &[CurvePoint],
    score: ScoreKind,
) -> BTreeMap<crate::policy::Strategy, Vec<&CurvePoint>> {
    let mut groups: BTreeMap<_, Vec<&CurvePoint>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.score == score) {
        groups.entry(p.strategy).or_default().push(p);
    }
    groups
}

/// Mean accuracy against α with 95% bands, one line per strategy.
pub fn accuracy_plot(points: &[CurvePoint], score: ScoreKind) -> LinePlot {
    LinePlot {
        title: format!("Accuracy vs miscoverage ({score})"),
        x_label: "α".into(),
        y_label: "accuracy".into(),
        series: by_strategy(points, score)
            .into_iter()
            .map(|(strategy, pts)| Series {
                name: strategy.as_str().into(),
                points: pts.iter().map(|p| (p.alpha, p.accuracy.mean)).collect(),
                band: Some(pts.iter().map(|p| p.accuracy_ci95).collect()),
            })
            .collect(),
    }
}

/// Mean workload against α for the strategies that consult experts.
pub fn workload_plot(points: &[CurvePoint], score: ScoreKind, metric: WorkloadMetric) -> LinePlot {
    LinePlot {
        title: format!("Workload vs miscoverage ({score})"),
        x_label: "α".into(),
        y_label: metric.label().into(),
        series: by_strategy(points, score)
            .into_iter()
            .filter(|(s, _)| s.uses_prediction_set())
            .map(|(strategy, pts)| Series {
                name: strategy.as_str().into(),
                points: pts.iter().map(|p| (p.alpha, metric.value(p))).collect(),
                band: None,
            })
            .collect(),
    }
}

/// Accuracy of each strategy against an ablation parameter.
pub fn ablation_plot(rows: &[AblationSummaryRow], x_label: &str, title: &str) -> LinePlot {
    let mut groups: BTreeMap<_, Vec<&AblationSummaryRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.strategy).or_default().push(r);
    }
    LinePlot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "accuracy at α_opt".into(),
        series: groups
            .into_iter()
            .map(|(strategy, mut rs)| {
                rs.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
                Series {
                    name: strategy.as_str().into(),
                    points: rs.iter().map(|r| (r.parameter, r.accuracy.mean)).collect(),
                    band: Some(rs.iter().map(|r| r.accuracy_ci95).collect()),
                }
            })
            .collect(),
    }
}

/// Files written by [`render_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub files: Vec<PathBuf>,
}

/// Reads `results.csv` and writes `summary.md` plus accuracy and workload
/// plots per score into `out_dir`.
pub fn render_report(results_csv: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Report> {
    let results = load_results(results_csv)?;
    if results.is_empty() {
        return Err(Error::Empty("results file"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summaries = summarize(&results)?;
    let table = summary_table(&summaries);
    let mut files = Vec::new();
    let summary_path = out_dir.join("summary.md");
    fs::write(&summary_path, &table).map_err(|e| Error::io(&summary_path, e))?;
    files.push(summary_path);

    let points = curves(&results);
    let mut scores: Vec<ScoreKind> = points.iter().map(|p| p.score).collect();
    scores.dedup();
    for score in scores {
        files.push(
            accuracy_plot(&points, score).write(out_dir.join(format!("accuracy_{score}.svg")))?,
        );
        for (metric, name) in [
            (WorkloadMetric::Queries, "queries"),
            (WorkloadMetric::MaxPerExpert, "max_qpe"),
            (WorkloadMetric::AvgPerExpert, "avg_qpe"),
        ] {
            files.push(
                workload_plot(&points, score, metric)
                    .write(out_dir.join(format!("workload_{name}_{score}.svg")))?,
            );
        }
    }
    Ok(Report { table, files })
}
