//! Directory-level evaluation: per-case metrics and summary statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_labels, HausdorffMode, MetricsReport, Region};
use crate::volume::{find_volume, read_labels};

/// Printed in place of a Hausdorff distance (or statistic) that is not defined.
pub const UNDEFINED: &str = "undefined";

pub const METRICS: [&str; 4] = ["dice", "sensitivity", "specificity", "hausdorff"];
pub const STATISTICS: [&str; 5] = ["Mean", "StdDev", "Median", "25quantile", "75quantile"];

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// `<metric>_<region>` column names.
    pub columns: Vec<String>,
    /// One row per entry of [`STATISTICS`]; empty when no case was evaluated.
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Summary {
    pub fn get(&self, statistic: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        let (_, row) = self.rows.iter().find(|(s, _)| s == statistic)?;
        row[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
    /// Case ids present on one side only, with the side that is missing.
    pub unmatched: Vec<(String, &'static str)>,
    pub summary: Summary,
}

/// Sample standard deviation (n - 1); zero for a single value.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn column_value(report: &MetricsReport, metric: &str, region: Region) -> Option<f64> {
    let r = report.region(region);
    match metric {
        "dice" => Some(r.dice),
        "sensitivity" => Some(r.sensitivity),
        "specificity" => Some(r.specificity),
        _ => r.hausdorff,
    }
}

/// Statistics over cases; undefined Hausdorff values are left out of their column.
pub fn summarize(reports: &[MetricsReport]) -> Summary {
    let mut columns = Vec::new();
    let mut values = Vec::new();
    for metric in METRICS {
        for region in Region::ALL {
            columns.push(format!("{metric}_{}", region.name()));
            let mut v: Vec<f64> = reports.iter().filter_map(|r| column_value(r, metric, region)).collect();
            v.sort_by(f64::total_cmp);
            values.push(v);
        }
    }
    if reports.is_empty() {
        return Summary { columns, rows: Vec::new() };
    }
    let rows = STATISTICS
        .iter()
        .map(|&stat| {
            let row = values
                .iter()
                .map(|v| {
                    if v.is_empty() {
                        return None;
                    }
                    Some(match stat {
                        "Mean" => v.iter().sum::<f64>() / v.len() as f64,
                        "StdDev" => std_dev(v),
                        "Median" => crate::metrics::quantile_sorted(v, 0.5),
                        "25quantile" => crate::metrics::quantile_sorted(v, 0.25),
                        _ => crate::metrics::quantile_sorted(v, 0.75),
                    })
                })
                .collect();
            (stat.to_string(), row)
        })
        .collect();
    Summary { columns, rows }
}

fn strip_nifti(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// Prediction files keyed by case id: `<id>.nii[.gz]` or `<id>/<id>_seg.nii[.gz]`.
pub fn find_predictions(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            continue;
        };
        if path.is_dir() {
            if let Some(seg) = find_volume(&path, &name, "seg") {
                out.insert(name, seg);
            }
        } else if let Some(id) = strip_nifti(&name) {
            out.insert(id.to_string(), path);
        }
    }
    Ok(out)
}

/// Ground-truth segmentations in the BraTS layout, keyed by case id.
pub fn find_ground_truth(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_dir() {
            continue;
        }
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(seg) = find_volume(&path, name, "seg") {
                out.insert(name.to_string(), seg);
            }
        }
    }
    Ok(out)
}

pub fn evaluate_dirs(predictions: &Path, ground_truth: &Path, mode: HausdorffMode) -> Result<Evaluation> {
    let preds = find_predictions(predictions)?;
    let gts = find_ground_truth(ground_truth)?;
    let mut reports = Vec::new();
    let mut unmatched = Vec::new();
    for (id, gt_path) in &gts {
        match preds.get(id) {
            Some(pred_path) => {
                let (gt, grid) = read_labels(gt_path)?;
                let (pred, _) = read_labels(pred_path)?;
                reports.push(evaluate_labels(id, pred.view(), gt.view(), grid.spacing, mode)?);
            }
            None => unmatched.push((id.clone(), "prediction")),
        }
    }
    for id in preds.keys() {
        if !gts.contains_key(id) {
            unmatched.push((id.clone(), "ground_truth"));
        }
    }
    let summary = summarize(&reports);
    Ok(Evaluation {
        reports,
        unmatched,
        summary,
    })
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => UNDEFINED.to_string(),
    }
}

pub fn metrics_table(reports: &[MetricsReport]) -> String {
    let mut s = String::from("case_id\tregion\tdice\tsensitivity\tspecificity\thausdorff\n");
    for r in reports {
        for m in &r.regions {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.case_id,
                m.region.name(),
                m.dice,
                m.sensitivity,
                m.specificity,
                fmt_value(m.hausdorff)
            );
        }
    }
    s
}

pub fn summary_table(summary: &Summary) -> String {
    let mut s = format!("statistic\t{}\n", summary.columns.join("\t"));
    for (stat, row) in &summary.rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
        let _ = writeln!(s, "{stat}\t{}", cells.join("\t"));
    }
    s
}

pub fn unmatched_table(unmatched: &[(String, &'static str)]) -> String {
    let mut s = String::from("case_id\tmissing\n");
    for (id, side) in unmatched {
        let _ = writeln!(s, "{id}\t{side}");
    }
    s
}

/// Writes `metrics.tsv`, `summary.tsv` and `unmatched.tsv` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("metrics.tsv", metrics_table(&eval.reports)),
        ("summary.tsv", summary_table(&eval.summary)),
        ("unmatched.tsv", unmatched_table(&eval.unmatched)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RegionMetrics;

    fn report(id: &str, dice: [f64; 3]) -> MetricsReport {
        MetricsReport {
            case_id: id.into(),
            regions: Region::ALL
                .iter()
                .zip(dice)
                .map(|(&region, d)| RegionMetrics {
                    region,
                    dice: d,
                    sensitivity: 1.0,
                    specificity: 1.0,
                    hausdorff: if region == Region::ET { None } else { Some(d * 10.0) },
                })
                .collect(),
        }
    }

    #[test]
    fn three_case_summary_by_hand() {
        let reports = vec![
            report("a", [0.9, 0.5, 0.2]),
            report("b", [0.7, 0.6, 0.4]),
            report("c", [0.8, 0.9, 0.9]),
        ];
        let s = summarize(&reports);
        let close = |a: Option<f64>, b: f64| assert!((a.unwrap() - b).abs() < 1e-12, "{a:?} vs {b}");
        close(s.get("Mean", "dice_WT"), 0.8);
        close(s.get("StdDev", "dice_WT"), 0.1);
        close(s.get("Median", "dice_TC"), 0.6);
        // sorted TC: 0.5, 0.6, 0.9; position 0.5 and 1.5
        close(s.get("25quantile", "dice_TC"), 0.55);
        close(s.get("75quantile", "dice_TC"), 0.75);
        close(s.get("Mean", "hausdorff_WT"), 8.0);
        assert_eq!(s.get("Mean", "hausdorff_ET"), None);
        assert!(summary_table(&s).contains(UNDEFINED));
    }

    #[test]
    fn empty_input_gives_empty_summary() {
        let s = summarize(&[]);
        assert!(s.rows.is_empty());
        assert_eq!(s.columns.len(), 12);
    }

    #[test]
    fn single_case_has_zero_spread() {
        assert_eq!(std_dev(&[0.3]), 0.0);
    }
}
