use std::fmt::Write as _;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{train_on, Dataset, RunReport};
use crate::io::{write_bytes, write_json};
use crate::model::Family;
use crate::Result;

/// Published AP for each family, printed for reference only.
pub fn reference_ap(family: Family) -> f64 {
    match family {
        Family::None => 28.7,
        Family::Haar => 30.0,
        Family::Fourier => 30.3,
        Family::Gabor => 31.3,
    }
}

pub fn row_label(family: Family) -> &'static str {
    match family {
        Family::None => "baseline",
        Family::Haar => "haar",
        Family::Fourier => "fourier",
        Family::Gabor => "gabor",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub family: Family,
    pub status: String,
    pub val_drfl: Option<f64>,
    pub mae: Option<f64>,
    pub count_error: Option<f64>,
    pub peak_recall: Option<f64>,
    pub dataset_hash: String,
    pub reference_ap: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>, width: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.6e}"),
        None => format!("{:>width$}", "-"),
    }
}

impl AblationTable {
    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<9} {:<6} {:>13} {:>13} {:>13} {:>13} {:>12}",
            "family", "status", "val_drfl", "mae", "count_error", "peak_recall", "ref_AP"
        )
        .expect("string write");
        for r in &self.rows {
            writeln!(
                out,
                "{:<9} {:<6} {} {} {} {} {:>12.1}",
                r.label,
                r.status,
                fmt_opt(r.val_drfl, 13),
                fmt_opt(r.mae, 13),
                fmt_opt(r.count_error, 13),
                fmt_opt(r.peak_recall, 13),
                r.reference_ap
            )
            .expect("string write");
        }
        writeln!(out, "dataset {}", self.dataset_hash).expect("string write");
        writeln!(out, "ref_AP: published detector AP per family, for reference; not compared against").expect("string write");
        out
    }
}

/// Train and evaluate every family on the same data and seed. Writes
/// `ablation.json` and `ablation.txt` to `base.out_dir`, and each run to
/// `base.out_dir/<family>/`.
pub fn ablate(base: &ExperimentConfig) -> Result<AblationTable> {
    let data = Dataset::prepare(base)?;
    let mut rows = Vec::new();
    for family in Family::ALL {
        let cfg = ExperimentConfig { family, out_dir: base.out_dir.join(family.as_str()), ..base.clone() };
        info!("ablation arm {family}");
        let label = row_label(family).to_string();
        let row = match train_on(&cfg, &data) {
            Ok(run) => {
                let v = &run.report.final_val;
                AblationRow {
                    label,
                    family,
                    status: "ok".into(),
                    val_drfl: Some(v.drfl),
                    mae: Some(v.density.mae),
                    count_error: Some(v.density.count_error),
                    peak_recall: Some(v.density.peak_recall),
                    dataset_hash: run.report.dataset_hash.clone(),
                    reference_ap: reference_ap(family),
                    error: None,
                }
            }
            Err(e) => {
                error!("ablation arm {family} failed: {e}");
                AblationRow {
                    label,
                    family,
                    status: "failed".into(),
                    val_drfl: None,
                    mae: None,
                    count_error: None,
                    peak_recall: None,
                    dataset_hash: data.hash.clone(),
                    reference_ap: reference_ap(family),
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let table = AblationTable { config_hash: base.hash(), dataset_hash: data.hash.clone(), epochs: base.epochs, rows };
    write_json(&base.out_dir.join("ablation.json"), &table)?;
    write_bytes(&base.out_dir.join("ablation.txt"), table.to_text().as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub family: Family,
    pub final_val_drfl: f64,
    pub mae: f64,
    pub peak_recall: f64,
    /// First epoch whose val DRFL is below the baseline's final val DRFL.
    pub crossing_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dataset_hash: String,
    pub epochs: usize,
    pub dual: ArmSummary,
    pub baseline: ArmSummary,
    pub lower_val_drfl: bool,
    pub mae_not_worse: bool,
    pub recall_not_worse: bool,
    pub pass: bool,
}

fn crossing(run: &RunReport, threshold: f64) -> Option<usize> {
    run.epochs.iter().find(|e| e.val_drfl < threshold).map(|e| e.epoch)
}

fn summary(family: Family, run: &RunReport, threshold: f64) -> ArmSummary {
    ArmSummary {
        family,
        final_val_drfl: run.final_val.drfl,
        mae: run.final_val.density.mae,
        peak_recall: run.final_val.density.peak_recall,
        crossing_epoch: crossing(run, threshold),
    }
}

/// Both curves as CSV: `epoch,gabor_train,gabor_val,none_train,none_val`.
pub fn curves_csv(dual: &RunReport, baseline: &RunReport) -> String {
    let mut out = format!(
        "epoch,{d}_train_drfl,{d}_val_drfl,{b}_train_drfl,{b}_val_drfl\n",
        d = dual.family,
        b = baseline.family
    );
    for (a, b) in dual.epochs.iter().zip(&baseline.epochs) {
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            a.epoch, a.train_drfl, a.val_drfl, b.train_drfl, b.val_drfl
        )
        .expect("string write");
    }
    out
}

pub struct ConvergenceOutcome {
    pub report: ConvergenceReport,
    pub dual: RunReport,
    pub baseline: RunReport,
}

/// Train the gabor dual-domain model and the spatial-only baseline on the
/// same data and seed; writes `curves.csv` and `convergence.json`.
pub fn compare_convergence(base: &ExperimentConfig) -> Result<ConvergenceOutcome> {
    let data = Dataset::prepare(base)?;
    let run = |family: Family| {
        let cfg = ExperimentConfig { family, out_dir: base.out_dir.join(family.as_str()), ..base.clone() };
        train_on(&cfg, &data).map(|o| o.report)
    };
    let baseline = run(Family::None)?;
    let dual = run(Family::Gabor)?;
    let threshold = baseline.final_val.drfl;
    let d = summary(Family::Gabor, &dual, threshold);
    let b = summary(Family::None, &baseline, threshold);
    let lower_val_drfl = d.final_val_drfl < b.final_val_drfl;
    let mae_not_worse = d.mae <= b.mae;
    let recall_not_worse = d.peak_recall >= b.peak_recall;
    let report = ConvergenceReport {
        dataset_hash: data.hash.clone(),
        epochs: base.epochs,
        dual: d,
        baseline: b,
        lower_val_drfl,
        mae_not_worse,
        recall_not_worse,
        pass: lower_val_drfl && mae_not_worse && recall_not_worse,
    };
    write_bytes(&base.out_dir.join("curves.csv"), curves_csv(&dual, &baseline).as_bytes())?;
    write_json(&base.out_dir.join("convergence.json"), &report)?;
    Ok(ConvergenceOutcome { report, dual, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_order_and_references() {
        let labels: Vec<_> = Family::ALL.iter().map(|&f| row_label(f)).collect();
        assert_eq!(labels, ["baseline", "haar", "fourier", "gabor"]);
        let aps: Vec<_> = Family::ALL.iter().map(|&f| reference_ap(f)).collect();
        assert_eq!(aps, [28.7, 30.0, 30.3, 31.3]);
    }

    #[test]
    fn text_table_aligns() {
        let row = |family, v: Option<f64>| AblationRow {
            label: row_label(family).into(),
            family,
            status: if v.is_some() { "ok" } else { "failed" }.into(),
            val_drfl: v,
            mae: v,
            count_error: v,
            peak_recall: v,
            dataset_hash: "h".into(),
            reference_ap: reference_ap(family),
            error: None,
        };
        let t = AblationTable {
            config_hash: "c".into(),
            dataset_hash: "h".into(),
            epochs: 1,
            rows: vec![row(Family::None, Some(0.5)), row(Family::Haar, None)],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
        assert_eq!(lines[1].len(), lines[2].len());
        assert!(lines[2].starts_with("haar      failed"));
    }
}
