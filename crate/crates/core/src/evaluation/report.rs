use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{area_under_pr, max_recall_point, EvalError, PRPoint, PoseReport};

pub const PR_CURVE_FILE: &str = "pr_curve.csv";
pub const POSE_REPORT_FILE: &str = "pose_report.csv";
pub const POSE_ERRORS_FILE: &str = "pose_errors.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalResults {
    /// One curve per method name.
    pub curves: Vec<(String, Vec<PRPoint>)>,
    pub poses: Vec<PoseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub num_predicted: usize,
    pub num_correct: usize,
    pub num_gt: usize,
    pub precision_undefined: bool,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub method: String,
    pub acc5: f64,
    pub acc10: f64,
    pub acc15: f64,
    pub failures: usize,
}

#[derive(Debug, Serialize)]
struct ErrorRow<'a> {
    method: &'a str,
    pair_index: usize,
    error_deg: f64,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalError + '_ {
    move |e| EvalError::Io(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

/// Writes `pr_curve.csv`, `pose_report.csv`, `pose_errors.csv` and
/// `summary.txt` into `out_dir`; returns the written paths.
pub fn emit_report(results: &EvalResults, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let pr_path = out_dir.join(PR_CURVE_FILE);
    let pr_rows = results.curves.iter().flat_map(|(method, curve)| {
        curve.iter().map(move |p| PrRow {
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
            num_predicted: p.num_predicted,
            num_correct: p.num_correct,
            num_gt: p.num_gt,
            precision_undefined: p.precision_undefined,
            method: method.clone(),
        })
    });
    write_rows(
        &pr_path,
        &["threshold", "precision", "recall", "num_predicted", "num_correct", "num_gt", "precision_undefined", "method"],
        pr_rows,
    )?;

    let pose_path = out_dir.join(POSE_REPORT_FILE);
    let pose_rows = results.poses.iter().map(|r| PoseRow {
        method: r.method.clone(),
        acc5: r.acc5,
        acc10: r.acc10,
        acc15: r.acc15,
        failures: r.failures,
    });
    write_rows(&pose_path, &["method", "acc5", "acc10", "acc15", "failures"], pose_rows)?;

    let errors_path = out_dir.join(POSE_ERRORS_FILE);
    let error_rows = results.poses.iter().flat_map(|r| {
        r.errors_deg.iter().enumerate().map(|(k, &e)| ErrorRow { method: &r.method, pair_index: k, error_deg: e })
    });
    write_rows(&errors_path, &["method", "pair_index", "error_deg"], error_rows)?;

    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary(results)).map_err(io(&summary_path))?;
    Ok(vec![pr_path, pose_path, errors_path, summary_path])
}

fn summary(results: &EvalResults) -> String {
    let mut s = String::new();
    for (method, curve) in &results.curves {
        let _ = write!(s, "pr {method}: auc {:.4}", area_under_pr(curve));
        if let Some(p) = max_recall_point(curve) {
            let _ = write!(s, ", max recall {:.4} at threshold {:.2} (precision {:.4})", p.recall, p.threshold, p.precision);
        }
        s.push('\n');
    }
    for r in &results.poses {
        let _ = writeln!(
            s,
            "pose {}: acc@5 {:.4}, acc@10 {:.4}, acc@15 {:.4}, failures {}/{}",
            r.method,
            r.acc5,
            r.acc10,
            r.acc15,
            r.failures,
            r.errors_deg.len()
        );
    }
    s
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

pub fn read_pr_curve(path: &Path) -> Result<Vec<PrRow>, EvalError> {
    read_rows(path)
}

pub fn read_pose_report(path: &Path) -> Result<Vec<PoseRow>, EvalError> {
    read_rows(path)
}
