//! Non-learned comparison methods: descriptor mutual nearest neighbors,
//! the ratio test, NOCS-consistency filtering and NOCS-based PnP poses.

use nalgebra::{Vector2, Vector3};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{sample_map_bilinear, DenseMap3D, EncodingError};
use crate::geometry::{solve_pnp, Correspondence2D3D, GeometryError, PnpEstimate, Pose, RansacConfig};
use crate::matcher::Match;
use crate::scenegen::{View, OBJECT_SIZE};

pub const DEFAULT_RATIO: f64 = 0.8;
pub const DENSE_PNP_CAP: usize = 5000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("empty descriptor set")]
    EmptyInput,
    #[error("the ratio test needs at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("descriptor widths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Mnn,
    Ratio,
    NocsFilter,
    PnpSparse,
    PnpDense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub ratio: f64,
    /// NOCS distance threshold of the filter.
    pub nocs_distance: Option<f64>,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        Self { method, ratio: DEFAULT_RATIO, nocs_distance: None }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(BaselineError::InvalidConfig(format!("ratio {} not in (0, 1)", self.ratio)));
        }
        match (self.method, self.nocs_distance) {
            (BaselineMethod::NocsFilter, None) => {
                Err(BaselineError::InvalidConfig("the NOCS filter needs a distance threshold".into()))
            }
            (_, Some(d)) if !(d > 0.0) => Err(BaselineError::InvalidConfig(format!("NOCS distance {d} must be positive"))),
            _ => Ok(()),
        }
    }
}

fn distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>, BaselineError> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(BaselineError::EmptyInput);
    }
    if a.ncols() != b.ncols() {
        return Err(BaselineError::ShapeMismatch(a.ncols(), b.ncols()));
    }
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0).sqrt();
    }
    Ok(d)
}

fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values.enumerate().fold((usize::MAX, f64::INFINITY), |best, (k, v)| if v < best.1 { (k, v) } else { best })
}

/// Mutual nearest neighbors under Euclidean distance; confidence is
/// `1 - dist / max_dist` over the pairwise distance matrix.
pub fn match_mnn(desc_a: ArrayView2<f64>, desc_b: ArrayView2<f64>) -> Result<Vec<Match>, BaselineError> {
    let d = distances(desc_a, desc_b)?;
    let max = d.iter().copied().fold(0.0, f64::max);
    let col_best: Vec<usize> = d.columns().into_iter().map(|c| argmin(c.iter().copied()).0).collect();
    let mut out = Vec::new();
    for (i, row) in d.rows().into_iter().enumerate() {
        let (j, dist) = argmin(row.iter().copied());
        if col_best[j] == i {
            let confidence = if max > 0.0 { 1.0 - dist / max } else { 1.0 };
            out.push(Match { i, j, confidence });
        }
    }
    Ok(out)
}

/// Nearest neighbor kept when `d1 / d2 < ratio`; collisions on the same `j`
/// keep the closest claim. Confidence is `1 - d1 / d2`.
pub fn match_ratio(desc_a: ArrayView2<f64>, desc_b: ArrayView2<f64>, ratio: f64) -> Result<Vec<Match>, BaselineError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(BaselineError::InvalidConfig(format!("ratio {ratio} not in (0, 1)")));
    }
    let d = distances(desc_a, desc_b)?;
    if d.ncols() < 2 {
        return Err(BaselineError::TooFewCandidates(d.ncols()));
    }
    let mut claims: Vec<Option<(usize, f64, f64)>> = vec![None; d.ncols()];
    for (i, row) in d.rows().into_iter().enumerate() {
        let (j, d1) = argmin(row.iter().copied());
        let d2 = row.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        let r = if d2 > 0.0 { d1 / d2 } else { 1.0 };
        if r < ratio && claims[j].is_none_or(|(_, best, _)| d1 < best) {
            claims[j] = Some((i, d1, r));
        }
    }
    let mut out: Vec<Match> =
        claims.iter().enumerate().filter_map(|(j, c)| c.map(|(i, _, r)| Match { i, j, confidence: 1.0 - r })).collect();
    out.sort_by_key(|m| m.i);
    Ok(out)
}

/// Keeps matches whose NOCS values (bilinear lookups at the two keypoints)
/// lie within `d` of each other.
pub fn filter_by_nocs_distance(
    matches: &[Match],
    keypoints_a: &[Vector2<f64>],
    keypoints_b: &[Vector2<f64>],
    map_a: &DenseMap3D,
    map_b: &DenseMap3D,
    d: f64,
) -> Result<Vec<Match>, BaselineError> {
    let mut out = Vec::new();
    for m in matches {
        let (pa, pb) = (keypoints_a[m.i], keypoints_b[m.j]);
        let na = sample_map_bilinear(map_a, pa.x, pa.y)?;
        let nb = sample_map_bilinear(map_b, pb.x, pb.y)?;
        let dist = na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dist <= d {
            out.push(*m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PnpMode {
    Sparse,
    Dense,
}

/// Fixed hypothesis budget, no early termination, shared by every pose
/// estimator under evaluation.
pub const EVAL_RANSAC: RansacConfig =
    RansacConfig { max_iterations: 5000, threshold_px: 1.0, min_inliers: 12, confidence: 1.0, seed: 0 };

/// RANSAC settings for PnP on estimated NOCS: a 1.4 cm coordinate error
/// is several pixels at the rendered distances.
pub fn nocs_pnp_ransac(seed: u64) -> RansacConfig {
    RansacConfig { threshold_px: 4.0, ..EVAL_RANSAC }.with_seed(seed)
}

/// (pixel, NOCS point) pairs: on-mask keypoints for `Sparse`, on-mask pixels
/// at a uniform stride (at most 5000) for `Dense`.
pub fn nocs_correspondences(view: &View, mode: PnpMode) -> Vec<Correspondence2D3D> {
    let (w, h) = ((view.width() - 1) as f64, (view.height() - 1) as f64);
    match mode {
        PnpMode::Sparse => view
            .features
            .iter()
            .filter(|f| view.on_mask(f.x.round() as u32, f.y.round() as u32))
            .filter_map(|f| {
                let n = sample_map_bilinear(&view.nocs, f.x.clamp(0.0, w), f.y.clamp(0.0, h)).ok()?;
                Some(Correspondence2D3D::new(Vector2::new(f.x, f.y), Vector3::new(n[0], n[1], n[2])))
            })
            .collect(),
        PnpMode::Dense => {
            let pixels: Vec<(u32, u32)> =
                view.depth.valid_texels().map(|(x, y, _)| (x, y)).filter(|&(x, y)| view.nocs.is_valid(x, y)).collect();
            let stride = pixels.len().div_ceil(DENSE_PNP_CAP).max(1);
            pixels
                .iter()
                .step_by(stride)
                .map(|&(x, y)| {
                    let n = view.nocs.texel(x, y);
                    Correspondence2D3D::new(
                        Vector2::new(x as f64, y as f64),
                        Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64),
                    )
                })
                .collect()
        }
    }
}

/// Object-to-camera pose from the view's NOCS map; translation in meters.
pub fn pose_from_nocs_pnp(view: &View, mode: PnpMode, ransac: &RansacConfig) -> Result<PnpEstimate, BaselineError> {
    let corrs = nocs_correspondences(view, mode);
    let mut est = solve_pnp(&corrs, &view.camera.intrinsics, ransac)?;
    // world = (n - 0.5) * size
    let r = est.pose.rotation;
    est.pose.translation = (est.pose.translation + r * Vector3::repeat(0.5)) * OBJECT_SIZE;
    Ok(est)
}

/// Relative camera pose `pose_b ∘ pose_a⁻¹` from two per-view PnP solutions.
pub fn relative_pose_from_nocs(
    view_a: &View,
    view_b: &View,
    mode: PnpMode,
    ransac: &RansacConfig,
) -> Result<Pose, BaselineError> {
    let a = pose_from_nocs_pnp(view_a, mode, ransac)?;
    let b = pose_from_nocs_pnp(view_b, mode, &ransac.with_seed(ransac.seed.wrapping_add(1)))?;
    Ok(b.pose.compose(&a.pose.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_error_deg;
    use crate::scenegen::{generate_pair, ClassConfig, PairConfig, SignalNoiseConfig};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn brute_mnn(a: &Array2<f64>, b: &Array2<f64>) -> Vec<(usize, usize)> {
        let dist = |i: usize, j: usize| (&a.row(i) - &b.row(j)).mapv(|x| x * x).sum().sqrt();
        let mut out = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let row_min = (0..b.nrows()).all(|k| dist(i, j) <= dist(i, k));
                let col_min = (0..a.nrows()).all(|k| dist(i, j) <= dist(k, j));
                if row_min && col_min {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn brute_ratio(a: &Array2<f64>, b: &Array2<f64>, ratio: f64) -> Vec<(usize, usize)> {
        let dist = |i: usize, j: usize| (&a.row(i) - &b.row(j)).mapv(|x| x * x).sum().sqrt();
        let mut claims: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..a.nrows() {
            let mut ds: Vec<(f64, usize)> = (0..b.nrows()).map(|j| (dist(i, j), j)).collect();
            ds.sort_by(|x, y| x.0.total_cmp(&y.0));
            if ds[0].0 / ds[1].0 < ratio {
                claims.push((i, ds[0].1, ds[0].0));
            }
        }
        let mut out: Vec<(usize, usize)> = claims
            .iter()
            .filter(|&&(i, j, d)| claims.iter().all(|&(k, j2, d2)| j2 != j || k == i || d < d2))
            .map(|&(i, j, _)| (i, j))
            .collect();
        out.sort();
        out
    }

    #[test]
    fn orthonormal_sets_match_identically() {
        let e = Array2::<f64>::eye(5);
        let m = match_mnn(e.view(), e.view()).unwrap();
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(m.iter().all(|m| m.confidence == 1.0));
    }

    #[test]
    fn empty_sets_are_errors() {
        let e = Array2::<f64>::zeros((0, 4));
        let x = Array2::<f64>::eye(4);
        assert_eq!(match_mnn(e.view(), x.view()).unwrap_err(), BaselineError::EmptyInput);
        assert_eq!(match_ratio(x.view(), e.view(), 0.8).unwrap_err(), BaselineError::EmptyInput);
        let one = array![[1.0, 0.0, 0.0, 0.0]];
        assert_eq!(match_ratio(x.view(), one.view(), 0.8).unwrap_err(), BaselineError::TooFewCandidates(1));
    }

    #[test]
    fn mnn_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (a, b) = (random(&mut rng, 10, 6), random(&mut rng, 12, 6));
            let got: Vec<(usize, usize)> = match_mnn(a.view(), b.view()).unwrap().iter().map(|m| (m.i, m.j)).collect();
            assert_eq!(got, brute_mnn(&a, &b));
        }
    }

    #[test]
    fn ratio_equals_two_nn_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b) = (random(&mut rng, 10, 3), random(&mut rng, 12, 3));
            let got: Vec<(usize, usize)> = match_ratio(a.view(), b.view(), 0.8).unwrap().iter().map(|m| (m.i, m.j)).collect();
            assert_eq!(got, brute_ratio(&a, &b, 0.8));
        }
    }

    #[test]
    fn ratio_rejects_ambiguity_and_keeps_exact_matches() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0], [0.0, 1.0]];
        assert!(match_ratio(a.view(), b.view(), 0.99).unwrap().is_empty());
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        let m = match_ratio(a.view(), b.view(), 0.01).unwrap();
        assert_eq!((m[0].i, m[0].j, m[0].confidence), (0, 0, 1.0));
    }

    proptest! {
        #[test]
        fn baseline_matchers_are_one_to_one(seed in 0u64..500, n in 2usize..15, m in 2usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(&mut rng, n, 4), random(&mut rng, m, 4));
            for ms in [match_mnn(a.view(), b.view()).unwrap(), match_ratio(a.view(), b.view(), 0.9).unwrap()] {
                let mut is: Vec<usize> = ms.iter().map(|m| m.i).collect();
                let mut js: Vec<usize> = ms.iter().map(|m| m.j).collect();
                is.sort();
                js.sort();
                is.dedup();
                js.dedup();
                prop_assert_eq!(is.len(), ms.len());
                prop_assert_eq!(js.len(), ms.len());
            }
        }
    }

    fn nocs_map(values: &[((u32, u32), [f32; 3])]) -> DenseMap3D {
        let mut m = DenseMap3D::filled(16, 16, vec![0.5, 0.5, 0.5]);
        for &((x, y), v) in values {
            m.set(x, y, &v);
        }
        m
    }

    #[test]
    fn nocs_filter_keeps_close_pairs() {
        let kp: Vec<Vector2<f64>> = (0..3).map(|k| Vector2::new(2.0 + 4.0 * k as f64, 3.0)).collect();
        let a = nocs_map(&[((2, 3), [0.1, 0.1, 0.1]), ((6, 3), [0.5, 0.5, 0.5]), ((10, 3), [0.9, 0.2, 0.3])]);
        let b = nocs_map(&[((2, 3), [0.12, 0.1, 0.1]), ((6, 3), [0.5, 0.54, 0.5]), ((10, 3), [0.9, 0.4, 0.3])]);
        let matches: Vec<Match> = (0..3).map(|k| Match { i: k, j: k, confidence: 1.0 }).collect();
        let kept = filter_by_nocs_distance(&matches, &kp, &kp, &a, &b, 0.05).unwrap();
        assert_eq!(kept.iter().map(|m| m.i).collect::<Vec<_>>(), vec![0, 1]);
        let all = filter_by_nocs_distance(&matches, &kp, &kp, &a, &b, 3f64.sqrt()).unwrap();
        assert_eq!(all, matches);
        let outside = [Vector2::new(20.0, 3.0)];
        assert!(filter_by_nocs_distance(&matches[..1], &outside, &kp, &a, &b, 1.0).is_err());
    }

    #[test]
    fn nocs_filter_is_monotone_in_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<((u32, u32), [f32; 3])> =
            (0..16).map(|k| ((k, 5), [rng.gen(), rng.gen(), rng.gen()])).collect();
        let pts_b: Vec<((u32, u32), [f32; 3])> =
            (0..16).map(|k| ((k, 5), [rng.gen(), rng.gen(), rng.gen()])).collect();
        let (a, b) = (nocs_map(&pts), nocs_map(&pts_b));
        let kp: Vec<Vector2<f64>> = (0..16).map(|k| Vector2::new(k as f64, 5.0)).collect();
        let matches: Vec<Match> = (0..16).map(|k| Match { i: k, j: (k * 7) % 16, confidence: 0.5 }).collect();
        let mut prev: Vec<Match> = Vec::new();
        for d in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let kept = filter_by_nocs_distance(&matches, &kp, &kp, &a, &b, d).unwrap();
            assert!(prev.iter().all(|m| kept.contains(m)));
            prev = kept;
        }
        assert_eq!(prev.len(), 16);
    }

    fn pair(noise: Option<SignalNoiseConfig>, seed: u64) -> crate::scenegen::ScenePair {
        let cfg = PairConfig {
            class: ClassConfig { num_points: 600, ..ClassConfig::default() },
            baseline_deg: (90.0, 120.0),
            signal_noise: noise,
            ..PairConfig::default()
        };
        generate_pair(&cfg, seed).unwrap()
    }

    #[test]
    fn gt_nocs_pnp_recovers_the_relative_pose() {
        for seed in 0..3 {
            let p = pair(None, seed);
            for mode in [PnpMode::Sparse, PnpMode::Dense] {
                let rel = relative_pose_from_nocs(&p.view_a, &p.view_b, mode, &RansacConfig::default()).unwrap();
                let err = rotation_error_deg(&rel.rotation, &p.relative_pose.rotation).unwrap();
                let terr = (rel.translation - p.relative_pose.translation).norm();
                // keypoints carry sub-pixel jitter, dense texels do not
                let (rtol, ttol) = if mode == PnpMode::Dense { (0.1, 1e-3) } else { (1.0, 0.02) };
                assert!(err < rtol && terr < ttol, "{mode:?} {err} {terr}");
            }
        }
    }

    #[test]
    fn too_few_mask_pixels_is_insufficient() {
        let mut p = pair(None, 1);
        let keep: Vec<(u32, u32)> = p.view_a.depth.valid_texels().take(5).map(|(x, y, _)| (x, y)).collect();
        let all: Vec<(u32, u32)> = p.view_a.depth.valid_texels().map(|(x, y, _)| (x, y)).collect();
        for (x, y) in all {
            if !keep.contains(&(x, y)) {
                p.view_a.depth.invalidate(x, y);
            }
        }
        assert!(matches!(
            pose_from_nocs_pnp(&p.view_a, PnpMode::Dense, &RansacConfig::default()),
            Err(BaselineError::Geometry(GeometryError::InsufficientCorrespondences { .. }))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig::new(BaselineMethod::NocsFilter).validate().is_err());
        let ok = BaselineConfig { nocs_distance: Some(0.1), ..BaselineConfig::new(BaselineMethod::NocsFilter) };
        assert!(ok.validate().is_ok());
        assert!(BaselineConfig { ratio: 1.0, ..BaselineConfig::new(BaselineMethod::Ratio) }.validate().is_err());
    }
}
