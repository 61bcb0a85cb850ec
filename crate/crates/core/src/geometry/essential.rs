//! Normalized 8-point essential-matrix estimation inside RANSAC, and
//! cheirality-based decomposition into a relative pose.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Rotation3, SMatrix, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    sample_indices, scatter_condition, Correspondence2D2D, GeometryError, Intrinsics, Pose, RansacConfig,
};

const SAMPLE_SIZE: usize = 8;
const DEGENERATE_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub essential: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl EssentialEstimate {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    pub fn inlier_correspondences(&self, corrs: &[Correspondence2D2D]) -> Vec<Correspondence2D2D> {
        corrs.iter().zip(&self.inliers).filter(|(_, &keep)| keep).map(|(c, _)| *c).collect()
    }
}

/// Estimates the essential matrix relating two calibrated views such that
/// `x_b^T E x_a = 0` for normalized image points.
pub fn estimate_essential(
    corrs: &[Correspondence2D2D],
    intrinsics_a: &Intrinsics,
    intrinsics_b: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<EssentialEstimate, GeometryError> {
    if corrs.len() < SAMPLE_SIZE {
        return Err(GeometryError::InsufficientCorrespondences { needed: SAMPLE_SIZE, got: corrs.len() });
    }
    let xa: Vec<Vector2<f64>> = corrs.iter().map(|c| intrinsics_a.normalize(&c.pixel_a)).collect();
    let xb: Vec<Vector2<f64>> = corrs.iter().map(|c| intrinsics_b.normalize(&c.pixel_b)).collect();
    let ka_inv = intrinsics_a.matrix().try_inverse().expect("validated intrinsics are invertible");
    let kb_inv = intrinsics_b.matrix().try_inverse().expect("validated intrinsics are invertible");

    let ha: Vec<Vector3<f64>> = xa.iter().map(|p| p.push(1.0)).collect();
    let hb: Vec<Vector3<f64>> = xb.iter().map(|p| p.push(1.0)).collect();

    // Inliers are Sampson-consistent and triangulate in front of both
    // cameras under the best of the four decompositions.
    let score = |e: &Matrix3<f64>| -> (Vec<bool>, usize, f64) {
        let f = kb_inv.transpose() * e * ka_inv;
        let dist: Vec<f64> = corrs.iter().map(|c| sampson_distance_px(&f, &c.pixel_a, &c.pixel_b)).collect();
        let sampson_ok: Vec<bool> = dist.iter().map(|&d| d <= cfg.threshold_px).collect();
        let mask = decompositions(e)
            .into_iter()
            .flatten()
            .map(|(r, t)| {
                sampson_ok
                    .iter()
                    .zip(ha.iter().zip(&hb))
                    .map(|(&ok, (a, b))| ok && in_front_of_both(&r, &t, a, b))
                    .collect::<Vec<bool>>()
            })
            .max_by_key(|m| m.iter().filter(|&&b| b).count())
            .unwrap_or_else(|| vec![false; corrs.len()]);
        let count = mask.iter().filter(|&&b| b).count();
        let cost = dist
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { d * d } else { cfg.threshold_px * cfg.threshold_px })
            .sum();
        (mask, count, cost)
    };

    // Least-squares refit on the consensus set until it stops improving;
    // applied to every new best sample.
    let refit_consensus = |mut e: Matrix3<f64>, mut mask: Vec<bool>, mut count: usize, mut cost: f64| {
        for _ in 0..4 {
            if count < SAMPLE_SIZE {
                break;
            }
            let sa: Vec<Vector2<f64>> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let sb: Vec<Vector2<f64>> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let linear = eight_point(&sa, &sb);
            let pa: Vec<Vector2<f64>> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| c.pixel_a).collect();
            let pb: Vec<Vector2<f64>> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| c.pixel_b).collect();
            let nonlinear = refine_essential(&e, &pa, &pb, &ka_inv, &kb_inv);
            let mut improved = false;
            for refit in linear.into_iter().chain(nonlinear) {
                let (rmask, rcount, rcost) = score(&refit);
                if rcount > count || (rcount == count && rcost < cost) {
                    e = refit;
                    mask = rmask;
                    count = rcount;
                    cost = rcost;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        (e, mask, count, cost)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    let mut draws = 0;
    while iter < needed.min(cfg.max_iterations) && draws < cfg.max_iterations * 10 {
        draws += 1;
        let idx = sample_indices(&mut rng, corrs.len(), SAMPLE_SIZE);
        let sa: Vec<Vector2<f64>> = idx.iter().map(|&i| xa[i]).collect();
        let sb: Vec<Vector2<f64>> = idx.iter().map(|&i| xb[i]).collect();
        if scatter_condition(&sa) > DEGENERATE_CONDITION || scatter_condition(&sb) > DEGENERATE_CONDITION {
            continue;
        }
        iter += 1;
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let (mask, count, cost) = score(&e);
        let better = |c: usize, k: f64, best: &Option<(Matrix3<f64>, Vec<bool>, usize, f64)>| match best {
            None => true,
            Some((_, _, bc, bcost)) => c > *bc || (c == *bc && k < *bcost),
        };
        if better(count, cost, &best) {
            let (e, mask, count, cost) = refit_consensus(e, mask, count, cost);
            needed = cfg.required_iterations(count as f64 / corrs.len() as f64, SAMPLE_SIZE);
            best = Some((e, mask, count, cost));
        }
    }

    let Some((e, mask, count, _)) = best else {
        return Err(GeometryError::DegenerateConfiguration("every sample was degenerate".into()));
    };
    if count < cfg.min_inliers {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "best model has {count} inliers, below the minimum of {}",
            cfg.min_inliers
        )));
    }
    Ok(EssentialEstimate { essential: e, inliers: mask })
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn sampson_residual(f: &Matrix3<f64>, pa: &Vector2<f64>, pb: &Vector2<f64>) -> f64 {
    let a = Vector3::new(pa.x, pa.y, 1.0);
    let b = Vector3::new(pb.x, pb.y, 1.0);
    let fa = f * a;
    let ftb = f.transpose() * b;
    let den = (fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y).sqrt();
    if den > 0.0 {
        b.dot(&fa) / den
    } else {
        0.0
    }
}

/// Levenberg-Marquardt on pixel Sampson residuals over a rotation and a
/// unit translation direction, starting from `e`.
fn refine_essential(
    e: &Matrix3<f64>,
    pa: &[Vector2<f64>],
    pb: &[Vector2<f64>],
    ka_inv: &Matrix3<f64>,
    kb_inv: &Matrix3<f64>,
) -> Option<Matrix3<f64>> {
    if pa.len() < SAMPLE_SIZE {
        return None;
    }
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let mut r = u * w * v_t;
    let mut t: Vector3<f64> = u.column(2).into_owned();
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> DVector<f64> {
        let f = kb_inv.transpose() * skew(t) * r * ka_inv;
        DVector::from_iterator(pa.len(), pa.iter().zip(pb).map(|(a, b)| sampson_residual(&f, a, b)))
    };
    let step = |r: &Matrix3<f64>, t: &Vector3<f64>, d: &[f64; 5]| -> (Matrix3<f64>, Vector3<f64>) {
        let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let b1 = t.cross(&helper).normalize();
        let b2 = t.cross(&b1);
        let rot = Rotation3::new(Vector3::new(d[0], d[1], d[2]));
        (r * rot.matrix(), (t + b1 * d[3] + b2 * d[4]).normalize())
    };
    let mut res = residuals(&r, &t);
    let mut cost = res.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..30 {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(pa.len(), 5);
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = h;
            let (rk, tk) = step(&r, &t, &d);
            jac.set_column(k, &((residuals(&rk, &tk) - &res) / h));
        }
        let jtj: SMatrix<f64, 5, 5> = (jac.transpose() * &jac).fixed_view::<5, 5>(0, 0).into_owned();
        let jtr: SMatrix<f64, 5, 1> = (jac.transpose() * &res).fixed_view::<5, 1>(0, 0).into_owned();
        let mut accepted = false;
        for _ in 0..8 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [delta[0], delta[1], delta[2], delta[3], delta[4]];
            let (rn, tn) = step(&r, &t, &d);
            let rn_res = residuals(&rn, &tn);
            let new_cost = rn_res.norm_squared();
            if new_cost < cost {
                let gain = cost - new_cost;
                r = rn;
                t = tn;
                res = rn_res;
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = gain > 1e-12 * cost.max(1e-300);
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Some(skew(&t) * r)
}

/// Sampson distance (in pixels) of a correspondence under fundamental matrix `f`.
pub fn sampson_distance_px(f: &Matrix3<f64>, pa: &Vector2<f64>, pb: &Vector2<f64>) -> f64 {
    let a = Vector3::new(pa.x, pa.y, 1.0);
    let b = Vector3::new(pb.x, pb.y, 1.0);
    let fa = f * a;
    let ftb = f.transpose() * b;
    let num = b.dot(&fa);
    let den = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

fn hartley(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    if spread <= 1e-15 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / spread;
    Some(Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0))
}

/// Normalized 8-point solve on normalized image coordinates, projected onto
/// the essential manifold.
fn eight_point(xa: &[Vector2<f64>], xb: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let ta = hartley(xa)?;
    let tb = hartley(xb)?;
    let rows = xa.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let p = ta * Vector3::new(pa.x, pa.y, 1.0);
        let q = tb * Vector3::new(pb.x, pb.y, 1.0);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let f = v_t.row(min_idx);
    let en = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let e = tb.transpose() * en * ta;
    project_to_essential(&e)
}

/// Replaces the singular values with `(1, 1, 0)`.
fn project_to_essential(e: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    let mean = (s[0] + s[1]) / 2.0;
    if !(mean > 0.0) || !mean.is_finite() {
        return None;
    }
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t)
}

/// Picks the decomposition of `essential` that places the most points in
/// front of both cameras. The returned translation has unit norm.
pub fn recover_relative_pose(
    essential: &Matrix3<f64>,
    corrs: &[Correspondence2D2D],
    intrinsics_a: &Intrinsics,
    intrinsics_b: &Intrinsics,
) -> Result<Pose, GeometryError> {
    if corrs.is_empty() {
        return Err(GeometryError::InsufficientCorrespondences { needed: 1, got: 0 });
    }
    let Some(candidates) = decompositions(essential) else {
        return Err(GeometryError::DegenerateConfiguration("svd of essential matrix failed".into()));
    };

    let xa: Vec<Vector3<f64>> = corrs
        .iter()
        .map(|c| intrinsics_a.normalize(&c.pixel_a).push(1.0))
        .collect();
    let xb: Vec<Vector3<f64>> = corrs
        .iter()
        .map(|c| intrinsics_b.normalize(&c.pixel_b).push(1.0))
        .collect();

    let counts: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| xa.iter().zip(&xb).filter(|(a, b)| in_front_of_both(r, t, a, b)).count())
        .collect();
    let (best, &best_count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("four candidates");
    if 2 * best_count <= corrs.len() {
        return Err(GeometryError::CheiralityAmbiguity);
    }
    let (rotation, translation) = candidates[best];
    Ok(Pose { rotation, translation })
}

/// The four `(R, t)` factorizations of an essential matrix, `t` unit length.
fn decompositions(essential: &Matrix3<f64>) -> Option<[(Matrix3<f64>, Vector3<f64>); 4]> {
    let svd = essential.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).normalize();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Two-ray triangulation: solves `λa R xa + t = λb xb` in least squares and
/// checks both depths are positive.
fn in_front_of_both(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> bool {
    let ra = r * xa;
    // Normal equations of [ra, -xb] [λa, λb]^T = -t.
    let m = Matrix2::new(ra.dot(&ra), -ra.dot(xb), -ra.dot(xb), xb.dot(xb));
    let rhs = Vector2::new(-ra.dot(t), xb.dot(t));
    match m.try_inverse() {
        Some(inv) => {
            let l = inv * rhs;
            l.x > 0.0 && l.y > 0.0
        }
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_deg, Camera};
    use rand::Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(300.0, 300.0, 128.0, 128.0, 256, 256).unwrap()
    }

    fn synthetic_pair(seed: u64, n: usize) -> (Camera, Camera, Vec<Correspondence2D2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Camera::look_at(k(), &Vector3::new(0.0, -1.0, 0.2), &Vector3::zeros(), &Vector3::z()).unwrap();
        let b = Camera::look_at(k(), &Vector3::new(0.8, -0.7, 0.4), &Vector3::zeros(), &Vector3::z()).unwrap();
        let mut corrs = Vec::new();
        while corrs.len() < n {
            let p = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
            let (pa, _) = a.project(&p).unwrap();
            let (pb, _) = b.project(&p).unwrap();
            if k().contains(&pa) && k().contains(&pb) {
                corrs.push(Correspondence2D2D::new(pa, pb));
            }
        }
        (a, b, corrs)
    }

    #[test]
    fn noiseless_pair_is_all_inliers_with_tiny_residual() {
        let (a, b, corrs) = synthetic_pair(3, 50);
        let est = estimate_essential(&corrs, &k(), &k(), &RansacConfig::default()).unwrap();
        assert_eq!(est.num_inliers(), 50);
        let ki = k().matrix().try_inverse().unwrap();
        let f = ki.transpose() * est.essential * ki;
        for c in &corrs {
            assert!(sampson_distance_px(&f, &c.pixel_a, &c.pixel_b) < 1e-8);
        }
        let s = est.essential.singular_values();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(f64::total_cmp);
        assert!(s[0] < 1e-12 && (s[1] - s[2]).abs() < 1e-12);
        let pose = recover_relative_pose(&est.essential, &corrs, &k(), &k()).unwrap();
        let gt = Pose::relative(&a, &b);
        assert!(rotation_error_deg(&pose.rotation, &gt.rotation).unwrap() < 0.01);
        assert!((pose.translation.norm() - 1.0).abs() < 1e-9);
        assert!(pose.translation.dot(&gt.translation.normalize()).abs() > 0.9999);
    }

    #[test]
    fn too_few_correspondences() {
        let (_, _, corrs) = synthetic_pair(1, 7);
        assert_eq!(
            estimate_essential(&corrs, &k(), &k(), &RansacConfig::default()),
            Err(GeometryError::InsufficientCorrespondences { needed: 8, got: 7 })
        );
    }

    #[test]
    fn pure_translation_along_x() {
        let a = Camera::new(k(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let b = Camera::new(k(), Matrix3::identity(), Vector3::new(-0.3, 0.0, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corrs: Vec<_> = (0..30)
            .map(|_| {
                let p = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.5..3.0));
                Correspondence2D2D::new(a.project(&p).unwrap().0, b.project(&p).unwrap().0)
            })
            .collect();
        let est = estimate_essential(&corrs, &k(), &k(), &RansacConfig::default()).unwrap();
        let pose = recover_relative_pose(&est.essential, &corrs, &k(), &k()).unwrap();
        assert!(rotation_error_deg(&pose.rotation, &Matrix3::identity()).unwrap() < 1e-6);
        assert!((pose.translation.x.abs() - 1.0).abs() < 1e-9, "{:?}", pose.translation);
    }

    #[test]
    fn all_degenerate_input_is_reported() {
        let corrs: Vec<_> = (0..12)
            .map(|i| {
                let p = Vector2::new(10.0 + i as f64, 20.0);
                Correspondence2D2D::new(p, p)
            })
            .collect();
        assert!(matches!(
            estimate_essential(&corrs, &k(), &k(), &RansacConfig::default()),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
    }
}
