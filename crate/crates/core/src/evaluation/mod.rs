//! Match-level precision/recall, relative-pose accuracy, keypoint-count
//! ablation and CSV report emission.

mod report;

pub use report::{emit_report, read_pose_report, read_pr_curve, EvalResults, PoseRow, PrRow};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    filter_by_nocs_distance, match_mnn, match_ratio, nocs_pnp_ransac, relative_pose_from_nocs, BaselineError, PnpMode,
    EVAL_RANSAC,
};
use crate::geometry::{
    estimate_essential, recover_relative_pose, rotation_error_deg, Correspondence2D2D, GeometryError, Pose,
    RansacConfig,
};
use crate::matcher::{extract_matches, Match, MatcherError, MatcherWeights, SignalMode};
use crate::scenegen::{derive_seed, encoder_input, ScenePair, View};

pub const DEFAULT_NUM_THRESHOLDS: usize = 101;
pub const POSE_THRESHOLDS_DEG: [f64; 3] = [5.0, 10.0, 15.0];
pub const FAILURE_ERROR_DEG: f64 = 180.0;
/// Desk-scale keypoint counts of the ablation.
pub const ABLATION_COUNTS: [usize; 3] = [32, 64, 128];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("match ({i}, {j}) outside a {rows}×{cols} keypoint grid")]
    IndexOutOfRange { i: usize, j: usize, rows: usize, cols: usize },
    #[error("view has {got} keypoints, the ablation needs {needed}")]
    InsufficientKeypoints { needed: usize, got: usize },
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error("method {0} does not produce matches")]
    Unsupported(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// A way of producing matches or relative poses for a pair.
#[derive(Debug, Clone)]
pub enum Method {
    /// Trained matcher; the 3D signal is read according to its signal branch.
    Learned { name: String, weights: Box<MatcherWeights> },
    Mnn,
    Ratio(f64),
    /// Matches of `base` kept only when their NOCS values lie within `d`.
    NocsFiltered { base: Box<Method>, d: f64 },
    Pnp(PnpMode),
    /// Ground-truth labels as predictions.
    Oracle,
}

impl Method {
    pub fn learned(name: &str, weights: MatcherWeights) -> Self {
        Method::Learned { name: name.to_string(), weights: Box::new(weights) }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Learned { name, .. } => name.clone(),
            Method::Mnn => "mnn".into(),
            Method::Ratio(_) => "ratio".into(),
            Method::NocsFiltered { base, d } => format!("{}+nocs-filter@{d}", base.name()),
            Method::Pnp(PnpMode::Sparse) => "pnp-sparse".into(),
            Method::Pnp(PnpMode::Dense) => "pnp-dense".into(),
            Method::Oracle => "oracle".into(),
        }
    }

    /// All mutual matches with their confidences (threshold 0).
    pub fn predict(&self, pair: &ScenePair) -> Result<Vec<Match>, EvalError> {
        let descriptors = |v: &View| encoder_input(v, SignalMode::None).descriptors;
        let all = match self {
            Method::Learned { weights, .. } => {
                let mode = signal_mode_of(weights);
                let a = encoder_input(&pair.view_a, mode);
                let b = encoder_input(&pair.view_b, mode);
                extract_matches(&weights.match_pair(&a, &b)?.probabilities(), 0.0)
            }
            Method::Mnn => match_mnn(descriptors(&pair.view_a).view(), descriptors(&pair.view_b).view())?,
            Method::Ratio(r) => match_ratio(descriptors(&pair.view_a).view(), descriptors(&pair.view_b).view(), *r)?,
            Method::NocsFiltered { base, d } => {
                let base = base.predict(pair)?;
                let kp = |v: &View| v.features.iter().map(|f| nalgebra::Vector2::new(f.x, f.y)).collect::<Vec<_>>();
                filter_by_nocs_distance(
                    &base,
                    &kp(&pair.view_a),
                    &kp(&pair.view_b),
                    &pair.view_a.nocs,
                    &pair.view_b.nocs,
                    *d,
                )?
            }
            Method::Pnp(_) => return Err(EvalError::Unsupported(self.name())),
            Method::Oracle => pair.labels.matches.iter().map(|&(i, j)| Match { i, j, confidence: 1.0 }).collect(),
        };
        Ok(all.into_iter().filter(|m| m.confidence > 0.0).collect())
    }
}

pub fn signal_mode_of(weights: &MatcherWeights) -> SignalMode {
    match weights.encoder.mlp3d.as_ref().map(|s| s.signal_dim) {
        Some(3) => SignalMode::Nocs,
        Some(_) => SignalMode::Mde,
        None => SignalMode::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub num_predicted: usize,
    pub num_correct: usize,
    pub num_gt: usize,
}

impl MatchCounts {
    /// `None` when nothing was predicted.
    pub fn precision(&self) -> Option<f64> {
        (self.num_predicted > 0).then(|| self.num_correct as f64 / self.num_predicted as f64)
    }

    pub fn recall(&self) -> f64 {
        if self.num_gt == 0 {
            0.0
        } else {
            self.num_correct as f64 / self.num_gt as f64
        }
    }

    fn add(&mut self, other: &MatchCounts) {
        self.num_predicted += other.num_predicted;
        self.num_correct += other.num_correct;
        self.num_gt += other.num_gt;
    }
}

/// A predicted pair is correct iff it is a ground-truth match.
pub fn score_matches(
    predicted: &[Match],
    gt: &[(usize, usize)],
    num_a: usize,
    num_b: usize,
) -> Result<MatchCounts, EvalError> {
    let mut truth = std::collections::HashSet::with_capacity(gt.len());
    for &(i, j) in gt {
        if i >= num_a || j >= num_b {
            return Err(EvalError::IndexOutOfRange { i, j, rows: num_a, cols: num_b });
        }
        truth.insert((i, j));
    }
    let mut correct = 0;
    for m in predicted {
        if m.i >= num_a || m.j >= num_b {
            return Err(EvalError::IndexOutOfRange { i: m.i, j: m.j, rows: num_a, cols: num_b });
        }
        correct += truth.contains(&(m.i, m.j)) as usize;
    }
    Ok(MatchCounts { num_predicted: predicted.len(), num_correct: correct, num_gt: gt.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    /// 1 by convention when nothing is predicted; see `precision_undefined`.
    pub precision: f64,
    pub recall: f64,
    pub num_predicted: usize,
    pub num_correct: usize,
    pub num_gt: usize,
    pub precision_undefined: bool,
}

impl PRPoint {
    pub fn from_counts(threshold: f64, c: &MatchCounts) -> Self {
        Self {
            threshold,
            precision: c.precision().unwrap_or(1.0),
            recall: c.recall(),
            num_predicted: c.num_predicted,
            num_correct: c.num_correct,
            num_gt: c.num_gt,
            precision_undefined: c.num_predicted == 0,
        }
    }
}

/// `n` evenly spaced thresholds covering [0, 1].
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// Micro-averaged precision/recall: counts pooled over all pairs at each
/// confidence threshold (strictly greater than kept).
pub fn pr_curve(method: &Method, dataset: &[ScenePair], thresholds: &[f64]) -> Result<Vec<PRPoint>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(EvalError::UnsortedThresholds);
    }
    let per_pair: Vec<Vec<MatchCounts>> = dataset
        .par_iter()
        .map(|pair| {
            let predicted = method.predict(pair)?;
            let (na, nb) = (pair.view_a.features.len(), pair.view_b.features.len());
            thresholds
                .iter()
                .map(|&t| {
                    let kept: Vec<Match> = predicted.iter().copied().filter(|m| m.confidence > t).collect();
                    score_matches(&kept, &pair.labels.matches, na, nb)
                })
                .collect()
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut total = MatchCounts::default();
            per_pair.iter().for_each(|c| total.add(&c[k]));
            PRPoint::from_counts(t, &total)
        })
        .collect())
}

/// Highest-recall point; ties go to the higher threshold.
pub fn max_recall_point(curve: &[PRPoint]) -> Option<&PRPoint> {
    curve.iter().rev().max_by(|a, b| a.recall.total_cmp(&b.recall))
}

/// Best defined precision among points reaching `recall`.
pub fn precision_at_recall(curve: &[PRPoint], recall: f64) -> Option<f64> {
    curve
        .iter()
        .filter(|p| !p.precision_undefined && p.recall >= recall)
        .map(|p| p.precision)
        .max_by(f64::total_cmp)
}

/// Trapezoidal area under the precision-recall curve over defined points,
/// extended flat from the lowest-recall point down to recall 0.
pub fn area_under_pr(curve: &[PRPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> =
        curve.iter().filter(|p| !p.precision_undefined).map(|p| (p.recall, p.precision)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = pts[0].0 * pts[0].1;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1);
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub method: String,
    pub acc5: f64,
    pub acc10: f64,
    pub acc15: f64,
    /// Rotation error per pair in degrees, in dataset order.
    pub errors_deg: Vec<f64>,
    pub failures: usize,
}

impl PoseReport {
    pub fn from_errors(method: String, errors_deg: Vec<f64>, failures: usize) -> Self {
        let acc = |t: f64| {
            if errors_deg.is_empty() {
                0.0
            } else {
                errors_deg.iter().filter(|&&e| e <= t).count() as f64 / errors_deg.len() as f64
            }
        };
        let [t5, t10, t15] = POSE_THRESHOLDS_DEG;
        Self { method, acc5: acc(t5), acc10: acc(t10), acc15: acc(t15), errors_deg, failures }
    }
}

/// Essential-matrix relative pose from a match list.
pub fn pose_from_matches(pair: &ScenePair, matches: &[Match], ransac: &RansacConfig) -> Result<Pose, GeometryError> {
    let corrs: Vec<Correspondence2D2D> = matches
        .iter()
        .map(|m| {
            let (a, b) = (&pair.view_a.features[m.i], &pair.view_b.features[m.j]);
            Correspondence2D2D::new(nalgebra::Vector2::new(a.x, a.y), nalgebra::Vector2::new(b.x, b.y))
        })
        .collect();
    let (ka, kb) = (&pair.view_a.camera.intrinsics, &pair.view_b.camera.intrinsics);
    let est = estimate_essential(&corrs, ka, kb, ransac)?;
    recover_relative_pose(&est.essential, &est.inlier_correspondences(&corrs), ka, kb)
}

/// RANSAC settings of the essential-matrix pose evaluation: matches are
/// labeled within 3 px, and every pair gets the fixed hypothesis budget of
/// the PnP baselines.
pub fn essential_ransac(seed: u64) -> RansacConfig {
    RansacConfig { threshold_px: 3.0, min_inliers: 10, ..EVAL_RANSAC }.with_seed(seed)
}

fn pair_pose(method: &Method, pair: &ScenePair, seed: u64) -> Result<Pose, EvalError> {
    let pair_seed = derive_seed(seed, pair.id);
    match method {
        Method::Pnp(mode) => Ok(relative_pose_from_nocs(&pair.view_a, &pair.view_b, *mode, &nocs_pnp_ransac(pair_seed))?),
        _ => {
            let matches = method.predict(pair)?;
            let ransac = essential_ransac(pair_seed);
            pose_from_matches(pair, &matches, &ransac).map_err(|e| EvalError::Baseline(BaselineError::Geometry(e)))
        }
    }
}

fn is_estimation_failure(e: &EvalError) -> bool {
    matches!(
        e,
        EvalError::Baseline(
            BaselineError::Geometry(_) | BaselineError::EmptyInput | BaselineError::TooFewCandidates(_)
        )
    )
}

/// Relative-rotation accuracy at threshold 0; pairs where estimation fails
/// score 180°.
pub fn pose_eval(method: &Method, dataset: &[ScenePair], seed: u64) -> Result<PoseReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let outcomes: Vec<Option<f64>> = dataset
        .par_iter()
        .map(|pair| match pair_pose(method, pair, seed) {
            Ok(pose) => Ok(Some(
                rotation_error_deg(&pose.rotation, &pair.relative_pose.rotation).unwrap_or(FAILURE_ERROR_DEG),
            )),
            Err(e) if is_estimation_failure(&e) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, EvalError>>()?;
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let errors = outcomes.into_iter().map(|o| o.unwrap_or(FAILURE_ERROR_DEG)).collect();
    Ok(PoseReport::from_errors(method.name(), errors, failures))
}

/// Pose accuracy after keeping each view's `count` most confident keypoints.
pub fn ablation_keypoints(
    method: &Method,
    dataset: &[ScenePair],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<(usize, PoseReport)>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let needed = counts.iter().copied().max().unwrap_or(0);
    let fewest = dataset.iter().map(|p| p.view_a.features.len().min(p.view_b.features.len())).min().unwrap_or(0);
    if fewest < needed {
        return Err(EvalError::InsufficientKeypoints { needed, got: fewest });
    }
    counts
        .iter()
        .map(|&c| {
            let truncated: Vec<ScenePair> = dataset.iter().map(|p| p.truncated(c)).collect();
            let mut report = pose_eval(method, &truncated, seed)?;
            report.method = format!("{}@{c}", report.method);
            Ok((c, report))
        })
        .collect()
}
