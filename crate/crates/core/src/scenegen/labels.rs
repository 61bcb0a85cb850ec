use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::render::View;
use super::SceneError;

pub const MATCH_THRESHOLD_PX: f64 = 3.0;
pub const UNMATCHED_THRESHOLD_PX: f64 = 8.0;

/// Three-way supervision for one pair: GT matches, keypoints known to have
/// no counterpart, and (implicitly) everything else, which is ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchLabels {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl MatchLabels {
    pub fn num_supervised(&self) -> usize {
        self.matches.len() + self.unmatched_a.len() + self.unmatched_b.len()
    }

    /// Labels with the roles of A and B exchanged.
    pub fn swapped(&self) -> Self {
        let mut matches: Vec<(usize, usize)> = self.matches.iter().map(|&(i, j)| (j, i)).collect();
        matches.sort_unstable();
        Self { matches, unmatched_a: self.unmatched_b.clone(), unmatched_b: self.unmatched_a.clone() }
    }

    /// Drops every label touching a keypoint beyond the first `na` / `nb`.
    pub fn truncated(&self, na: usize, nb: usize) -> Self {
        Self {
            matches: self.matches.iter().copied().filter(|&(i, j)| i < na && j < nb).collect(),
            unmatched_a: self.unmatched_a.iter().copied().filter(|&i| i < na).collect(),
            unmatched_b: self.unmatched_b.iter().copied().filter(|&j| j < nb).collect(),
        }
    }
}

/// GT depth at a sub-pixel location: bilinear when the four neighbors are on
/// the mask, otherwise the nearest on-mask texel of the 3×3 neighborhood.
pub(crate) fn depth_at(view: &View, p: &Vector2<f64>) -> Option<f64> {
    let (w, h) = (view.width(), view.height());
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (p.x.floor() as u32).min(w.saturating_sub(2));
    let y0 = (p.y.floor() as u32).min(h.saturating_sub(2));
    let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
    if corners.iter().all(|&(x, y)| view.depth.is_valid(x, y)) {
        let (fx, fy) = (p.x - x0 as f64, p.y - y0 as f64);
        let d = |x, y| view.depth.texel(x, y)[0] as f64;
        return Some(
            (1.0 - fx) * (1.0 - fy) * d(x0, y0)
                + fx * (1.0 - fy) * d(x0 + 1, y0)
                + (1.0 - fx) * fy * d(x0, y0 + 1)
                + fx * fy * d(x0 + 1, y0 + 1),
        );
    }
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    let mut best: Option<(f64, f64)> = None;
    for y in cy - 1..=cy + 1 {
        for x in cx - 1..=cx + 1 {
            if x < 0 || y < 0 || !view.depth.is_valid(x as u32, y as u32) {
                continue;
            }
            let dist = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, view.depth.texel(x as u32, y as u32)[0] as f64));
            }
        }
    }
    best.map(|(_, d)| d)
}

/// Whether a point at camera depth `z` projecting to `q` is unoccluded in `view`.
fn unoccluded(view: &View, q: &Vector2<f64>, z: f64) -> bool {
    let (cx, cy) = (q.x.round() as i64, q.y.round() as i64);
    let mut deepest = f64::NEG_INFINITY;
    for y in cy - 1..=cy + 1 {
        for x in cx - 1..=cx + 1 {
            if x >= 0 && y >= 0 && view.depth.is_valid(x as u32, y as u32) {
                deepest = deepest.max(view.depth.texel(x as u32, y as u32)[0] as f64);
            }
        }
    }
    deepest.is_finite() && z <= deepest * 1.01 + 0.003
}

/// Each keypoint of `src` lifted with GT depth and projected into `dst`;
/// `None` when the depth is unknown or the point is hidden in `dst`.
fn reproject(src: &View, dst: &View) -> Vec<Option<Vector2<f64>>> {
    src.features
        .iter()
        .map(|f| {
            let p = Vector2::new(f.x, f.y);
            let d = depth_at(src, &p)?;
            let world = src.camera.unproject(&p, d).ok()?;
            let (q, z) = dst.camera.project(&world).ok()?;
            (dst.camera.intrinsics.contains(&q) && unoccluded(dst, &q, z)).then_some(q)
        })
        .collect()
}

fn check_depth(view: &View) -> Result<(), SceneError> {
    if view.depth.channels != 1 || view.depth.num_valid() == 0 {
        return Err(SceneError::MissingDepth);
    }
    Ok(())
}

/// Symmetric pixel cost `max(|π_B(X_i) − p_j|, |π_A(X_j) − p_i|)`; infinite
/// when either reprojection is unavailable.
pub fn reprojection_costs(a: &View, b: &View) -> Result<Vec<Vec<f64>>, SceneError> {
    check_depth(a)?;
    check_depth(b)?;
    let ra = reproject(a, b);
    let rb = reproject(b, a);
    Ok(a.features
        .iter()
        .zip(&ra)
        .map(|(fa, qa)| {
            b.features
                .iter()
                .zip(&rb)
                .map(|(fb, qb)| match (qa, qb) {
                    (Some(qa), Some(qb)) => {
                        let dab = (qa - Vector2::new(fb.x, fb.y)).norm();
                        let dba = (qb - Vector2::new(fa.x, fa.y)).norm();
                        dab.max(dba)
                    }
                    _ => f64::INFINITY,
                })
                .collect()
        })
        .collect())
}

/// Matches are mutual nearest neighbors of the reprojection cost within
/// 3 px; keypoints whose nearest cost exceeds 8 px (or that cannot be
/// reprojected) are unmatched; the rest are left unlabeled.
pub fn label_ground_truth(a: &View, b: &View) -> Result<MatchLabels, SceneError> {
    let cost = reprojection_costs(a, b)?;
    Ok(labels_from_costs(&cost, a.features.len(), b.features.len()))
}

pub(crate) fn labels_from_costs(cost: &[Vec<f64>], m: usize, n: usize) -> MatchLabels {
    let argmin = |it: &mut dyn Iterator<Item = f64>| {
        it.enumerate().fold((usize::MAX, f64::INFINITY), |best, (k, c)| if c < best.1 { (k, c) } else { best })
    };
    let row_best: Vec<(usize, f64)> = (0..m).map(|i| argmin(&mut cost[i].iter().copied())).collect();
    let col_best: Vec<(usize, f64)> = (0..n).map(|j| argmin(&mut (0..m).map(|i| cost[i][j]))).collect();
    let mut labels = MatchLabels::default();
    for (i, &(j, c)) in row_best.iter().enumerate() {
        if c <= MATCH_THRESHOLD_PX && col_best[j].0 == i {
            labels.matches.push((i, j));
        }
        if c > UNMATCHED_THRESHOLD_PX {
            labels.unmatched_a.push(i);
        }
    }
    for (j, &(_, c)) in col_best.iter().enumerate() {
        if c > UNMATCHED_THRESHOLD_PX {
            labels.unmatched_b.push(j);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{DenseMap3D, LocalFeature};
    use crate::geometry::{Camera, Intrinsics};
    use crate::scenegen::render::NOCS_FILL;
    use nalgebra::Vector3;

    fn plane_view(points: &[(f64, f64)]) -> View {
        let k = Intrinsics::new(200.0, 200.0, 128.0, 128.0, 256, 256).unwrap();
        let camera = Camera::look_at(k, &Vector3::new(0.0, 0.0, -1.0), &Vector3::zeros(), &Vector3::y()).unwrap();
        let mut depth = DenseMap3D::filled(256, 256, vec![0.0]);
        for y in 0..256 {
            for x in 0..256 {
                depth.set(x, y, &[1.0]);
            }
        }
        let features = points
            .iter()
            .map(|&(x, y)| LocalFeature { x, y, confidence: 1.0, descriptor: vec![1.0], signal: vec![] })
            .collect();
        View {
            camera,
            features,
            point_ids: vec![None; points.len()],
            depth,
            nocs: DenseMap3D::filled(256, 256, NOCS_FILL.to_vec()),
            inverse_depth: DenseMap3D::filled(256, 256, vec![0.0]),
            estimated: false,
        }
    }

    /// All-pairs oracle over the same cost definition.
    fn brute_force(a: &[(f64, f64)], b: &[(f64, f64)]) -> MatchLabels {
        let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        let mut labels = MatchLabels::default();
        for (i, &p) in a.iter().enumerate() {
            let min_i = b.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min);
            for (j, &q) in b.iter().enumerate() {
                let c = d(p, q);
                let min_j = a.iter().map(|&r| d(r, q)).fold(f64::INFINITY, f64::min);
                if c <= 3.0 && c == min_i && c == min_j {
                    labels.matches.push((i, j));
                }
            }
            if min_i > 8.0 {
                labels.unmatched_a.push(i);
            }
        }
        for (j, &q) in b.iter().enumerate() {
            if a.iter().map(|&p| d(p, q)).fold(f64::INFINITY, f64::min) > 8.0 {
                labels.unmatched_b.push(j);
            }
        }
        labels
    }

    #[test]
    fn identical_views_match_every_keypoint_to_itself() {
        let pts = [(10.0, 20.0), (100.5, 30.25), (200.0, 200.0)];
        let v = plane_view(&pts);
        let labels = label_ground_truth(&v, &v).unwrap();
        assert_eq!(labels.matches, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(labels.unmatched_a.is_empty() && labels.unmatched_b.is_empty());
    }

    #[test]
    fn three_way_thresholds_follow_the_oracle() {
        let a = [(100.0, 100.0), (150.0, 100.0), (100.0, 150.0)];
        let b = [(101.0, 100.0), (152.9, 100.0), (105.0, 150.0)];
        let labels = label_ground_truth(&plane_view(&a), &plane_view(&b)).unwrap();
        assert_eq!(labels.matches, vec![(0, 0), (1, 1)]);
        assert!(labels.unmatched_a.is_empty() && labels.unmatched_b.is_empty());
        assert_eq!(labels, brute_force(&a, &b));
    }

    #[test]
    fn random_layouts_agree_with_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a: Vec<(f64, f64)> = (0..15).map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0))).collect();
            let b: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0))).collect();
            let got = label_ground_truth(&plane_view(&a), &plane_view(&b)).unwrap();
            assert_eq!(got, brute_force(&a, &b));
            let back = label_ground_truth(&plane_view(&b), &plane_view(&a)).unwrap();
            assert_eq!(back, got.swapped());
        }
    }

    #[test]
    fn missing_depth_is_an_error() {
        let mut v = plane_view(&[(1.0, 1.0)]);
        v.depth = DenseMap3D::filled(256, 256, vec![0.0]);
        assert_eq!(label_ground_truth(&v, &v).unwrap_err(), SceneError::MissingDepth);
    }
}
