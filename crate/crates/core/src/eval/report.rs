//! Fold aggregation and on-disk report formats.
//!
//! Layout written by [`write_outputs`]:
//!
//! ```text
//! report.json            ExperimentReport (schema_version 1)
//! summary.csv            mean and population std across folds
//! curves/<tag>_fold<k>_pr.csv     threshold,precision,recall
//! curves/<tag>_fold<k>_roc.csv    threshold,fpr,tpr
//! curves/<tag>_fold<k>_hist.csv   bin_lo,bin_hi,tp,fp
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::harness::{EvalReport, ExperimentConfig, ExperimentKind, ExperimentOutput};
use crate::error::Result;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Label used for the macro average over held-out classes.
pub const MACRO_CLASS: &str = "macro";

/// Fold mean and population standard deviation of one scorer setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub scorer: String,
    pub ratio: Option<f64>,
    pub held_out_class: Option<String>,
    pub folds: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy_mean: Option<f64>,
    pub precision_mean: Option<f64>,
    pub sensitivity_mean: Option<f64>,
    pub specificity_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub dataset_digest: String,
    pub config: ExperimentConfig,
    pub summary: Vec<SummaryRow>,
    pub reports: Vec<EvalReport>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let d: Vec<f64> = v.flatten().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

type Key = (String, Option<u64>, Option<String>);

fn key(r: &EvalReport) -> Key {
    (r.scorer.clone(), r.ratio.map(f64::to_bits), r.held_out_class.clone())
}

fn row(key: &Key, group: &[&EvalReport]) -> SummaryRow {
    let (ap_mean, ap_std) = mean_std(&group.iter().map(|r| r.ap).collect::<Vec<_>>());
    let (auc_mean, auc_std) = mean_std(&group.iter().map(|r| r.auc).collect::<Vec<_>>());
    SummaryRow {
        scorer: key.0.clone(),
        ratio: key.1.map(f64::from_bits),
        held_out_class: key.2.clone(),
        folds: group.len(),
        ap_mean,
        ap_std,
        auc_mean,
        auc_std,
        accuracy_mean: mean_defined(group.iter().map(|r| r.accuracy)),
        precision_mean: mean_defined(group.iter().map(|r| r.precision)),
        sensitivity_mean: mean_defined(group.iter().map(|r| r.sensitivity)),
        specificity_mean: mean_defined(group.iter().map(|r| r.specificity)),
    }
}

/// One row per (scorer, ratio, held-out class) in first-appearance order.
/// Class-robustness runs get an extra `macro` row per scorer: the unweighted
/// mean over classes within each fold, then mean and std over folds.
pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<Key> = Vec::new();
    for r in reports {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows: Vec<SummaryRow> = keys
        .iter()
        .map(|k| {
            let group: Vec<&EvalReport> = reports.iter().filter(|r| &key(r) == k).collect();
            row(k, &group)
        })
        .collect();

    let mut scorers: Vec<String> = Vec::new();
    for r in reports.iter().filter(|r| r.held_out_class.is_some()) {
        if !scorers.contains(&r.scorer) {
            scorers.push(r.scorer.clone());
        }
    }
    for s in scorers {
        let mut folds: Vec<usize> = reports.iter().filter(|r| r.scorer == s).map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        let macros: Vec<EvalReport> = folds
            .iter()
            .map(|&f| {
                let g: Vec<&EvalReport> = reports
                    .iter()
                    .filter(|r| r.scorer == s && r.fold == f && r.held_out_class.is_some())
                    .collect();
                let avg = |x: &dyn Fn(&EvalReport) -> f64| g.iter().map(|r| x(r)).sum::<f64>() / g.len() as f64;
                let avg_opt = |x: &dyn Fn(&EvalReport) -> Option<f64>| mean_defined(g.iter().map(|r| x(r)));
                EvalReport {
                    ap: avg(&|r| r.ap),
                    auc: avg(&|r| r.auc),
                    accuracy: avg_opt(&|r| r.accuracy),
                    precision: avg_opt(&|r| r.precision),
                    sensitivity: avg_opt(&|r| r.sensitivity),
                    specificity: avg_opt(&|r| r.specificity),
                    held_out_class: Some(MACRO_CLASS.into()),
                    ..g[0].clone()
                }
            })
            .collect();
        let refs: Vec<&EvalReport> = macros.iter().collect();
        rows.push(row(&(s, None, Some(MACRO_CLASS.into())), &refs));
    }
    rows
}

/// Summary table with fixed six-decimal formatting; undefined values are
/// written as `NA`.
pub fn summary_csv(experiment: ExperimentKind, rows: &[SummaryRow]) -> String {
    let f = |v: f64| format!("{v:.6}");
    let o = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from(
        "experiment,scorer,ratio,held_out_class,folds,ap_mean,ap_std,auc_mean,auc_std,\
         accuracy_mean,precision_mean,sensitivity_mean,specificity_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            experiment.as_str(),
            r.scorer,
            r.ratio.map(|x| x.to_string()).unwrap_or_default(),
            r.held_out_class.as_deref().unwrap_or(""),
            r.folds,
            f(r.ap_mean),
            f(r.ap_std),
            f(r.auc_mean),
            f(r.auc_std),
            o(r.accuracy_mean),
            o(r.precision_mean),
            o(r.sensitivity_mean),
            o(r.specificity_mean),
        );
    }
    s
}

impl ExperimentReport {
    pub fn from_output(out: &ExperimentOutput) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: out.config.experiment,
            dataset_digest: out.dataset_digest.clone(),
            config: out.config.clone(),
            summary: summarize(&out.reports),
            reports: out.reports.clone(),
        }
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(self.experiment, &self.summary)
    }
}

fn file_tag(r: &EvalReport) -> String {
    let mut tag = r.scorer.clone();
    if let Some(x) = r.ratio {
        tag.push_str(&format!("_r{x}"));
    }
    if let Some(c) = &r.held_out_class {
        tag.push('_');
        tag.push_str(c);
    }
    tag.chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' { ch } else { '_' })
        .collect::<String>()
        + &format!("_fold{}", r.fold)
}

/// Writes the JSON report, the summary CSV and per-report curve files into
/// `dir`, creating it if needed.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    for r in &report.reports {
        let tag = file_tag(r);
        let mut pr = String::from("threshold,precision,recall\n");
        for p in &r.pr_curve {
            let _ = writeln!(pr, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        fs::write(curves.join(format!("{tag}_pr.csv")), pr)?;
        let mut roc = String::from("threshold,fpr,tpr\n");
        for p in &r.roc_curve {
            let _ = writeln!(roc, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        fs::write(curves.join(format!("{tag}_roc.csv")), roc)?;
        let h = &r.histogram;
        let mut hist = String::from("bin_lo,bin_hi,tp,fp\n");
        for k in 0..h.tp_counts.len() {
            let _ = writeln!(hist, "{},{},{},{}", h.edges[k], h.edges[k + 1], h.tp_counts[k], h.fp_counts[k]);
        }
        let _ = writeln!(hist, "nonfinite,nonfinite,{},{}", h.non_finite[0], h.non_finite[1]);
        fs::write(curves.join(format!("{tag}_hist.csv")), hist)?;
    }
    Ok(())
}
