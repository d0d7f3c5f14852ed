use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aggregate::{
    cross_domain_matrices, cross_domain_table, fraction_table, scaling_curves, DomainMatrix, MeanStd, Metric,
    ScalingCurve,
};
use super::config::StdKind;
use super::store::RunRecord;
use crate::error::{Error, Result};
use crate::splits::PlanKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// `report.md` plus the CSV tables and SVG plots.
    #[default]
    Md,
    /// CSV tables and SVG plots only.
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::invalid("format", format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

const SCALING_CSV: &str = "scaling_summary.csv";
const TABLE_CSV: &str = "results_full_data.csv";
const DOMAIN_CSV: &str = "crossdomain_summary.csv";
const MATRIX_CSV: &str = "crossdomain_matrix.csv";
const SCALING_SVG: &str = "scaling_curves.svg";

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn push_ms(row: &mut Vec<String>, v: Option<&MeanStd>) {
    match v {
        Some(s) => {
            row.push(format!("{:.6}", s.mean));
            row.push(format!("{:.6}", s.std));
        }
        None => {
            row.push(String::new());
            row.push(String::new());
        }
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn metric_header(prefix: &str) -> Vec<String> {
    Metric::ALL
        .iter()
        .flat_map(|m| [format!("{prefix}{}_mean", m.as_str()), format!("{prefix}{}_std", m.as_str())])
        .collect()
}

fn fmt_cell(v: Option<&MeanStd>) -> String {
    v.map_or_else(|| "n/a".into(), |s| s.to_string())
}

/// Writes tables, plots and (for [`ReportFormat::Md`]) a markdown report
/// into `out_dir`. Fails without creating anything when `records` is empty.
pub fn emit_report(records: &[RunRecord], format: ReportFormat, out_dir: &Path, std: StdKind) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Empty("results store".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut md = String::new();
    writeln!(md, "# Benchmark report\n").unwrap();
    writeln!(md, "{} run records. Values are mean ± {} std over runs.\n", records.len(), match std {
        StdKind::Population => "population",
        StdKind::Sample => "sample",
    })
    .unwrap();

    let has_scaling = records.iter().any(|r| r.plan_kind == PlanKind::Scaling);
    let has_domain = records.iter().any(|r| r.plan_kind == PlanKind::CrossDomain);

    if has_scaling {
        let curves: Vec<(Metric, Vec<ScalingCurve>)> =
            Metric::ALL.iter().map(|&m| (m, scaling_curves(records, m, std))).collect();
        let mut rows = Vec::new();
        let mut fractions: Vec<f64> = records.iter().filter_map(|r| r.fraction).collect();
        fractions.sort_by(f64::total_cmp);
        fractions.dedup();
        for &f in &fractions {
            for row in fraction_table(records, f, std) {
                let mut out = vec![row.model.clone(), row.mode.to_string(), f.to_string(), row.runs.to_string()];
                for m in Metric::ALL {
                    push_ms(&mut out, row.metrics.get(&m));
                }
                rows.push(out);
            }
        }
        let mut header: Vec<String> = ["model", "mode", "fraction", "runs"].map(String::from).to_vec();
        header.extend(metric_header(""));
        let path = out_dir.join(SCALING_CSV);
        write_csv(&path, &header, &rows)?;
        files.push(path);

        let full = fraction_table(records, 1.0, std);
        if !full.is_empty() {
            let rows: Vec<Vec<String>> = full
                .iter()
                .map(|row| {
                    let mut out = vec![row.model.clone(), row.mode.to_string(), row.runs.to_string()];
                    for m in Metric::ALL {
                        push_ms(&mut out, row.metrics.get(&m));
                    }
                    out
                })
                .collect();
            let mut header: Vec<String> = ["model", "mode", "runs"].map(String::from).to_vec();
            header.extend(metric_header(""));
            let path = out_dir.join(TABLE_CSV);
            write_csv(&path, &header, &rows)?;
            files.push(path);

            writeln!(md, "## Results at 100% of the training data\n").unwrap();
            writeln!(md, "| Model | Mode | Runs | Balanced ACC | Weighted F1 | AUROC |").unwrap();
            writeln!(md, "|---|---|---|---|---|---|").unwrap();
            for row in &full {
                writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    row.model,
                    row.mode,
                    row.runs,
                    fmt_cell(row.metrics.get(&Metric::BalancedAccuracy)),
                    fmt_cell(row.metrics.get(&Metric::WeightedF1)),
                    fmt_cell(row.metrics.get(&Metric::Auroc)),
                )
                .unwrap();
            }
            writeln!(md).unwrap();
        }

        let path = out_dir.join(SCALING_SVG);
        std::fs::write(&path, scaling_svg(&curves)).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        writeln!(md, "## Dataset scaling\n").unwrap();
        writeln!(md, "![scaling curves]({SCALING_SVG})\n").unwrap();
        writeln!(md, "| Model | Mode | Fraction | Runs | AUROC |").unwrap();
        writeln!(md, "|---|---|---|---|---|").unwrap();
        for &f in &fractions {
            for row in fraction_table(records, f, std) {
                writeln!(
                    md,
                    "| {} | {} | {} | {} | {} |",
                    row.model,
                    row.mode,
                    f,
                    row.runs,
                    fmt_cell(row.metrics.get(&Metric::Auroc))
                )
                .unwrap();
            }
        }
        writeln!(md).unwrap();
    }

    if has_domain {
        let table = cross_domain_table(records, std);
        let rows: Vec<Vec<String>> = table
            .iter()
            .map(|r| {
                let mut out = vec![
                    r.model.clone(),
                    r.mode.to_string(),
                    r.in_scenarios.to_string(),
                    r.out_scenarios.to_string(),
                ];
                for (_, v) in r.columns() {
                    push_ms(&mut out, v.as_ref());
                }
                out
            })
            .collect();
        let mut header: Vec<String> = ["model", "mode", "in_scenarios", "out_scenarios"].map(String::from).to_vec();
        for m in Metric::ALL {
            for side in ["in", "out"] {
                header.push(format!("{side}_{}_mean", m.as_str()));
                header.push(format!("{side}_{}_std", m.as_str()));
            }
        }
        let path = out_dir.join(DOMAIN_CSV);
        write_csv(&path, &header, &rows)?;
        files.push(path);

        writeln!(md, "## Cross-domain generalization\n").unwrap();
        writeln!(
            md,
            "Each train/test domain pair is averaged over its runs first; columns are mean ± std over those pairs.\n"
        )
        .unwrap();
        write!(md, "| Model | Mode |").unwrap();
        for m in Metric::ALL {
            write!(md, " {} in | {} out |", m.label(), m.label()).unwrap();
        }
        writeln!(md).unwrap();
        writeln!(md, "|---|---|{}", "---|".repeat(6)).unwrap();
        for r in &table {
            write!(md, "| {} | {} |", r.model, r.mode).unwrap();
            for (_, v) in r.columns() {
                write!(md, " {} |", fmt_cell(v.as_ref())).unwrap();
            }
            writeln!(md).unwrap();
        }
        writeln!(md).unwrap();

        let matrices = cross_domain_matrices(records, Metric::Auroc, std);
        let mut rows = Vec::new();
        for mx in &matrices {
            for (i, a) in mx.domains.iter().enumerate() {
                for (j, b) in mx.domains.iter().enumerate() {
                    if let Some(s) = mx.cells[i][j] {
                        rows.push(vec![
                            mx.model.clone(),
                            mx.mode.to_string(),
                            a.clone(),
                            b.clone(),
                            s.n.to_string(),
                            format!("{:.6}", s.mean),
                            format!("{:.6}", s.std),
                        ]);
                    }
                }
            }
        }
        let header = ["model", "mode", "train_domain", "test_domain", "runs", "auroc_mean", "auroc_std"]
            .map(String::from)
            .to_vec();
        let path = out_dir.join(MATRIX_CSV);
        write_csv(&path, &header, &rows)?;
        files.push(path);
        for mx in &matrices {
            let name = format!("crossdomain_{}_{}.svg", file_stem(&mx.model), mx.mode);
            let path = out_dir.join(&name);
            std::fs::write(&path, matrix_svg(mx)).map_err(|e| Error::io(&path, e))?;
            files.push(path);
            writeln!(md, "### {} ({})\n\n![cross-domain AUROC]({name})\n", mx.model, mx.mode).unwrap();
        }
    }

    if format == ReportFormat::Md {
        let path = out_dir.join("report.md");
        std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(ReportFiles { files })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One panel per metric; x is log10(fraction), y is the metric in [0, 1].
fn scaling_svg(panels: &[(Metric, Vec<ScalingCurve>)]) -> String {
    let (pw, ph, margin) = (300.0, 240.0, 45.0);
    let legend_h = 18.0 * panels.first().map_or(0, |p| p.1.len()) as f64 + 10.0;
    let width = panels.len() as f64 * (pw + margin) + margin;
    let height = ph + 2.0 * margin + legend_h;
    let fractions: Vec<f64> = panels
        .iter()
        .flat_map(|(_, cs)| cs.iter().flat_map(|c| c.points.iter().map(|p| p.0)))
        .collect();
    let lo = fractions.iter().cloned().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (k, (metric, curves)) in panels.iter().enumerate() {
        let x0 = margin + k as f64 * (pw + margin);
        let y0 = margin;
        let px = |f: f64| x0 + (f.log10() - lo) / (hi - lo) * pw;
        let py = |v: f64| y0 + (1.0 - v.clamp(0.0, 1.0)) * ph;
        writeln!(s, r#"<g class="panel" data-metric="{}">"#, metric.as_str()).unwrap();
        writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, x0 + pw / 2.0, y0 - 10.0, metric.label()).unwrap();
        let mut e = lo;
        while e <= hi + 1e-9 {
            let x = px(10f64.powf(e));
            writeln!(s, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/>"##, y0, y0 + ph).unwrap();
            writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}%</text>"#, y0 + ph + 14.0, 100.0 * 10f64.powf(e)).unwrap();
            e += 1.0;
        }
        for t in 0..=5 {
            let v = t as f64 / 5.0;
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 4.0, py(v) + 4.0).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">dataset fraction (log)</text>"#, x0 + pw / 2.0, y0 + ph + 30.0).unwrap();
        for (i, c) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = c.points.iter().map(|(f, m)| format!("{:.2},{:.2}", px(*f), py(m.mean))).collect();
            writeln!(
                s,
                r#"<polyline class="curve" data-series="{} {}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                esc(&c.model),
                c.mode,
                pts.join(" ")
            )
            .unwrap();
            for (f, m) in &c.points {
                let (x, y) = (px(*f), py(m.mean));
                writeln!(
                    s,
                    r#"<line class="errbar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                    py(m.mean + m.std),
                    py(m.mean - m.std)
                )
                .unwrap();
                writeln!(s, r#"<circle class="point" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#).unwrap();
            }
        }
        writeln!(s, "</g>").unwrap();
    }
    if let Some((_, curves)) = panels.first() {
        for (i, c) in curves.iter().enumerate() {
            let y = height - legend_h + 18.0 * i as f64 + 8.0;
            let color = PALETTE[i % PALETTE.len()];
            writeln!(s, r#"<rect x="{margin}" y="{}" width="12" height="4" fill="{color}"/>"#, y - 4.0).unwrap();
            writeln!(s, r#"<text x="{}" y="{}">{} ({})</text>"#, margin + 18.0, y + 2.0, esc(&c.model), c.mode).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map with a white-to-blue ramp over [0.5, 1].
fn matrix_svg(mx: &DomainMatrix) -> String {
    let n = mx.domains.len();
    let (cell, margin) = (60.0, 70.0);
    let size = margin + n as f64 * cell + 20.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="11">"#,
        size + 20.0
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{} ({}): {} by train (rows) and test (columns) domain</text>"#,
        size / 2.0,
        esc(&mx.model),
        mx.mode,
        mx.metric.label()
    )
    .unwrap();
    for (i, d) in mx.domains.iter().enumerate() {
        let c = margin + (i as f64 + 0.5) * cell;
        writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#, margin - 8.0, esc(d)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, margin - 8.0, c + 4.0, esc(d)).unwrap();
    }
    for (i, row) in mx.cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (margin + j as f64 * cell, margin + i as f64 * cell);
            let (fill, text) = match v {
                Some(m) => {
                    let t = ((m.mean - 0.5) / 0.5).clamp(0.0, 1.0);
                    let r = (255.0 * (1.0 - 0.8 * t)) as u8;
                    let g = (255.0 * (1.0 - 0.55 * t)) as u8;
                    (format!("rgb({r},{g},255)"), format!("{:.3}", m.mean))
                }
                None => ("#eeeeee".to_string(), "n/a".to_string()),
            };
            writeln!(
                s,
                r##"<rect class="cell" data-train="{}" data-test="{}" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#888"/>"##,
                esc(&mx.domains[i]),
                esc(&mx.domains[j])
            )
            .unwrap();
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{text}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
