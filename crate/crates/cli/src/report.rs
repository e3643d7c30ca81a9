//! The comparison grid across regimes and the audit figures.

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use retsynth::classify::{read_predictions, TrainRegime};
use retsynth::dataman::{Label, Modality, Split};
use retsynth::evalkit::{roc_curve, AuditReport, MetricsReport};
use retsynth::plot::{distribution_plot, line_plot};

use crate::error::{CliError, CliResult};
use crate::pipeline::{fusion_tag, read_metrics, EvalRow, AUDIT, EVALUATE, REPORT};
use crate::rundir::{RunDir, StageManifest};

pub const METRICS: [&str; 5] = ["AUPR", "AUROC", "F1", "Sensitivity", "Specificity"];

fn metric(m: &MetricsReport, name: &str) -> f64 {
    match name {
        "AUPR" => m.aupr,
        "AUROC" => m.auroc,
        "F1" => m.f1,
        "Sensitivity" => m.sensitivity,
        "Specificity" => m.specificity,
        _ => unreachable!("unknown metric {name}"),
    }
}

fn regime_header(r: TrainRegime) -> &'static str {
    match r {
        TrainRegime::RealOnly => "Real",
        TrainRegime::SynthOnly => "Synth.",
        TrainRegime::PretrainFinetune => "Pretr.",
    }
}

/// One row of the grid: a model on a split, with every metric under every
/// regime (`None` where that combination was not run).
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub split: Split,
    pub group: &'static str,
    pub label: String,
    /// `values[metric][regime]`, in [`METRICS`] and [`TrainRegime::ALL`] order.
    pub values: [[Option<f64>; 3]; 5],
}

/// Validation and test blocks; unimodal rows per modality, then fusion
/// without and with metadata. Columns are metrics × regimes.
pub fn comparison_grid(rows: &[EvalRow], modalities: &[Modality]) -> Vec<GridRow> {
    let mut models: Vec<(&'static str, String, String)> = modalities
        .iter()
        .map(|m| ("Unimodal", m.tag().to_string(), m.tag().to_string()))
        .collect();
    models.push(("Multimodal", "No metadata".into(), fusion_tag(false).into()));
    models.push(("Multimodal", "With metadata".into(), fusion_tag(true).into()));
    let mut out = Vec::new();
    for split in [Split::Val, Split::Test] {
        for (group, label, key) in &models {
            let mut values = [[None; 3]; 5];
            for (ri, r) in TrainRegime::ALL.iter().enumerate() {
                if let Some(row) = rows
                    .iter()
                    .find(|e| e.model == *key && e.metrics.split == split && e.metrics.regime == r.tag())
                {
                    for (mi, name) in METRICS.iter().enumerate() {
                        values[mi][ri] = Some(metric(&row.metrics, name));
                    }
                }
            }
            out.push(GridRow {
                split,
                group,
                label: label.clone(),
                values,
            });
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

pub fn grid_tsv(grid: &[GridRow]) -> String {
    let mut s = String::from("split\tgroup\tmodel");
    for m in METRICS {
        for r in TrainRegime::ALL {
            let _ = write!(s, "\t{m} {}", regime_header(r));
        }
    }
    s.push('\n');
    for row in grid {
        let _ = write!(s, "{}\t{}\t{}", row.split.tag(), row.group, row.label);
        for per_metric in &row.values {
            for v in per_metric {
                let _ = write!(s, "\t{}", cell(*v));
            }
        }
        s.push('\n');
    }
    s
}

/// Markdown rendering with the best regime per metric in bold.
pub fn grid_markdown(grid: &[GridRow]) -> String {
    let mut s = String::from("| |");
    for m in METRICS {
        for r in TrainRegime::ALL {
            let _ = write!(s, " {m} {} |", regime_header(r));
        }
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(METRICS.len() * 3));
    s.push('\n');
    let mut last: Option<(Split, &str)> = None;
    for row in grid {
        if last.map(|l| l.0) != Some(row.split) {
            let name = if row.split == Split::Val { "Validation" } else { "Test" };
            let _ = writeln!(s, "| **{name}** |{}", " |".repeat(METRICS.len() * 3));
        }
        if last != Some((row.split, row.group)) {
            let _ = writeln!(s, "| {} |{}", row.group, " |".repeat(METRICS.len() * 3));
        }
        last = Some((row.split, row.group));
        let _ = write!(s, "| - {} |", row.label);
        for per_metric in &row.values {
            let best = per_metric.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let present = per_metric.iter().flatten().count();
            for v in per_metric {
                match v {
                    Some(x) if present > 1 && *x == best => {
                        let _ = write!(s, " **{x:.3}** |");
                    }
                    _ => {
                        let _ = write!(s, " {} |", cell(*v));
                    }
                }
            }
        }
        s.push('\n');
    }
    s
}

fn roc_plots(run: &RunDir, rows: &[EvalRow]) -> CliResult<Vec<String>> {
    let mut written = Vec::new();
    for regime in TrainRegime::ALL {
        if !rows.iter().any(|r| r.metrics.regime == regime.tag()) {
            continue;
        }
        for split in [Split::Val, Split::Test] {
            let mut series = Vec::new();
            for &m in &run.config.modalities {
                let path = run.path(&format!("predictions/{}/{}.tsv", regime.short(), m.tag()));
                if !path.exists() {
                    continue;
                }
                let preds = read_predictions(&path)?;
                let (scores, labels): (Vec<f64>, Vec<bool>) = preds
                    .iter()
                    .filter(|p| p.split == split && p.label.is_known())
                    .map(|p| (1.0 - p.p_neg, p.label == Label::Pos))
                    .unzip();
                series.push((m.tag().to_string(), roc_curve(&scores, &labels)?));
            }
            let svg = line_plot(
                &format!("ROC, {} ({})", regime.tag(), split.tag()),
                "1 - specificity",
                "sensitivity",
                (0.0, 1.0),
                (0.0, 1.0),
                &series,
            );
            let rel = format!("report/roc_{}_{}.svg", regime.short(), split.tag());
            run.write(&run.path(&rel), svg.as_bytes())?;
            written.push(rel);
        }
    }
    Ok(written)
}

fn audit_figures(run: &RunDir) -> CliResult<Vec<String>> {
    let p = run.path("reports/audit.json");
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let report: AuditReport = serde_json::from_str(&text)?;
    let mut written = Vec::new();
    for a in &report.modalities {
        let stars = |p: f64| if p < 0.005 { " **" } else { "" };
        let title = format!(
            "{}: SvR-RvR WD {:.3}{}, RvR-SvS WD {:.3}{} ({} synthetic, {} real)",
            a.modality,
            a.wd_svr_rvr,
            stars(a.ks_svr_rvr.p_value),
            a.wd_rvr_svs,
            stars(a.ks_rvr_svs.p_value),
            a.n_synthetic,
            a.n_real
        );
        let svg = distribution_plot(
            &title,
            "maximum pearsonr",
            &[("SvR", &a.svr[..]), ("RvR", &a.rvr[..]), ("SvS", &a.svs[..])],
        );
        let rel = format!("report/audit_{}.svg", a.modality.tag());
        run.write(&run.path(&rel), svg.as_bytes())?;
        written.push(rel);
    }
    Ok(written)
}

pub fn report_stage(run: &RunDir) -> CliResult<StageManifest> {
    let started = Instant::now();
    let mut ups = vec![run.require(EVALUATE, REPORT)?];
    let rows = read_metrics(run)?;
    let grid = comparison_grid(&rows, &run.config.modalities);
    run.write(&run.path("report/table2.tsv"), grid_tsv(&grid).as_bytes())?;
    run.write(&run.path("report/table2.md"), grid_markdown(&grid).as_bytes())?;
    let mut outputs = vec!["report/table2.tsv".to_string(), "report/table2.md".to_string()];
    outputs.extend(roc_plots(run, &rows)?);
    if run.stage(AUDIT)?.is_some() {
        ups.push(run.require(AUDIT, REPORT)?);
        outputs.extend(audit_figures(run)?);
    } else {
        log::warn!("audit stage not run; report has no audit figures");
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    run.finish(REPORT, &ups, &refs, started)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, split: Split, regime: TrainRegime, v: f64) -> EvalRow {
        EvalRow {
            model: model.into(),
            metrics: MetricsReport {
                auroc: v,
                aupr: v,
                f1: v,
                sensitivity: v,
                specificity: v,
                precision: v,
                youden_threshold: 0.5,
                split,
                regime: regime.tag().into(),
                n_pos: 1,
                n_neg: 1,
            },
        }
    }

    #[test]
    fn grid_has_table_shape_and_dashes() {
        let mods = Modality::PIPELINE;
        let mut rows = Vec::new();
        for m in mods {
            for r in TrainRegime::ALL {
                rows.push(row(m.tag(), Split::Val, r, 0.5));
                rows.push(row(m.tag(), Split::Test, r, 0.6));
            }
        }
        rows.push(row("MULTIMODAL", Split::Val, TrainRegime::RealOnly, 0.7));
        let grid = comparison_grid(&rows, &mods);
        assert_eq!(grid.len(), 2 * (mods.len() + 2));
        let tsv = grid_tsv(&grid);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 1 + grid.len());
        assert!(lines.iter().all(|l| l.split('\t').count() == 3 + 15));
        let fused = &grid[mods.len()];
        assert_eq!(fused.label, "No metadata");
        assert_eq!(fused.values[1], [Some(0.7), None, None]);
        assert!(lines[1 + mods.len()].ends_with("-\t-"));
        let md = grid_markdown(&grid);
        assert!(md.contains("**Validation**") && md.contains("**Test**"));
    }
}
