//! Perspective-n-Point: DLT initialization on minimal samples of six,
//! Gauss-Newton refinement of the reprojection error on the consensus set.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    nearest_rotation, sample_indices, scatter_condition, Correspondence2D3D, GeometryError, Intrinsics, Pose,
    RansacConfig,
};

const SAMPLE_SIZE: usize = 6;
const DEGENERATE_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpEstimate {
    /// Maps points of the 3D frame into the camera frame (metric translation).
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

impl PnpEstimate {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

pub fn solve_pnp(
    corrs: &[Correspondence2D3D],
    intrinsics: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PnpEstimate, GeometryError> {
    if corrs.len() < SAMPLE_SIZE {
        return Err(GeometryError::InsufficientCorrespondences { needed: SAMPLE_SIZE, got: corrs.len() });
    }
    let normalized: Vec<Vector2<f64>> = corrs.iter().map(|c| intrinsics.normalize(&c.pixel)).collect();
    let score = |pose: &Pose| -> (Vec<bool>, usize, f64) {
        let mut mask = Vec::with_capacity(corrs.len());
        let (mut count, mut cost) = (0, 0.0);
        for c in corrs {
            let e = reprojection_error(pose, intrinsics, c);
            let inlier = e <= cfg.threshold_px;
            if inlier {
                count += 1;
                cost += e * e;
            } else {
                cost += cfg.threshold_px * cfg.threshold_px;
            }
            mask.push(inlier);
        }
        (mask, count, cost)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Pose, Vec<bool>, usize, f64)> = None;
    let mut needed = cfg.max_iterations;
    let (mut iter, mut draws) = (0, 0);
    while iter < needed.min(cfg.max_iterations) && draws < cfg.max_iterations * 10 {
        draws += 1;
        let idx = sample_indices(&mut rng, corrs.len(), SAMPLE_SIZE);
        let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| corrs[i].point).collect();
        let px: Vec<Vector2<f64>> = idx.iter().map(|&i| normalized[i]).collect();
        if scatter_condition(&pts) > DEGENERATE_CONDITION || scatter_condition(&px) > DEGENERATE_CONDITION {
            continue;
        }
        iter += 1;
        let Some(pose) = dlt(&pts, &px) else { continue };
        let (mask, count, cost) = score(&pose);
        let better = match &best {
            None => true,
            Some((_, _, bc, bcost)) => count > *bc || (count == *bc && cost < *bcost),
        };
        if better {
            needed = cfg.required_iterations(count as f64 / corrs.len() as f64, SAMPLE_SIZE);
            best = Some((pose, mask, count, cost));
        }
    }
    let Some((mut pose, mut mask, mut count, mut cost)) = best else {
        return Err(GeometryError::DegenerateConfiguration("every sample was degenerate".into()));
    };

    for _ in 0..4 {
        let inl: Vec<&Correspondence2D3D> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| c).collect();
        if inl.len() < SAMPLE_SIZE {
            break;
        }
        let pts: Vec<Vector3<f64>> = inl.iter().map(|c| c.point).collect();
        let px: Vec<Vector2<f64>> = inl.iter().map(|c| intrinsics.normalize(&c.pixel)).collect();
        let init = dlt(&pts, &px).filter(|p| score(p).1 >= count).unwrap_or(pose);
        let refined = gauss_newton(&init, &inl, intrinsics, 30);
        let (rmask, rcount, rcost) = score(&refined);
        if rcount > count || (rcount == count && rcost < cost) {
            pose = refined;
            mask = rmask;
            count = rcount;
            cost = rcost;
        } else {
            break;
        }
    }
    if count < cfg.min_inliers.min(corrs.len()) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "best pose has {count} inliers, below the minimum of {}",
            cfg.min_inliers
        )));
    }
    Ok(PnpEstimate { pose, inliers: mask })
}

pub(crate) fn reprojection_error(pose: &Pose, k: &Intrinsics, c: &Correspondence2D3D) -> f64 {
    let pc = pose.transform(&c.point);
    if pc.z <= 0.0 {
        return f64::INFINITY;
    }
    let proj = k.denormalize(&Vector2::new(pc.x / pc.z, pc.y / pc.z));
    (proj - c.pixel).norm()
}

/// Linear pose from normalized image points, with both point sets
/// conditioned before the solve.
fn dlt(points: &[Vector3<f64>], xy: &[Vector2<f64>]) -> Option<Pose> {
    let n = points.len() as f64;
    let c3 = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let s3 = points.iter().map(|p| (p - c3).norm()).sum::<f64>() / n;
    let c2 = xy.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let s2 = xy.iter().map(|p| (p - c2).norm()).sum::<f64>() / n;
    if s3 <= 1e-15 || s2 <= 1e-15 {
        return None;
    }
    let (k3, k2) = (3f64.sqrt() / s3, 2f64.sqrt() / s2);
    let mut t3 = Matrix4::identity() * k3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-k3 * c3));
    let t2 = Matrix3::new(k2, 0.0, -k2 * c2.x, 0.0, k2, -k2 * c2.y, 0.0, 0.0, 1.0);

    let rows = (2 * points.len()).max(12);
    let mut a = DMatrix::<f64>::zeros(rows, 12);
    for (i, (p, q)) in points.iter().zip(xy).enumerate() {
        let x = t3 * p.push(1.0);
        let u = t2 * q.push(1.0);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -u.x * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -u.y * x[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = v_t.row(min_idx);
    let pn = SMatrix::<f64, 3, 4>::from_row_slice(&v.iter().copied().collect::<Vec<_>>());
    let mut p = t2.try_inverse()? * pn * t3;
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let r = nearest_rotation(&m);
    let scale = (r.transpose() * m).trace() / 3.0;
    if !(scale.abs() > 1e-15) || !scale.is_finite() {
        return None;
    }
    let t = p.column(3) / scale;
    let pose = Pose { rotation: r, translation: t.into_owned() };
    let front = points.iter().filter(|x| pose.transform(x).z > 0.0).count();
    (2 * front > points.len()).then_some(pose)
}

/// Minimizes pixel reprojection error with left-multiplied rotation updates.
fn gauss_newton(init: &Pose, corrs: &[&Correspondence2D3D], k: &Intrinsics, max_iters: usize) -> Pose {
    let cost = |pose: &Pose| -> f64 {
        corrs
            .iter()
            .map(|c| {
                let e = reprojection_error(pose, k, c);
                e * e
            })
            .sum()
    };
    let mut pose = *init;
    let mut current = cost(&pose);
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            let pc = pose.transform(&c.point);
            if pc.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / pc.z;
            let proj = k.denormalize(&Vector2::new(pc.x * iz, pc.y * iz));
            let r = proj - c.pixel;
            let dproj = SMatrix::<f64, 2, 3>::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            );
            // d(pc)/d(omega) = -[pc]_x, d(pc)/d(dt) = I
            let skew = Matrix3::new(0.0, -pc.z, pc.y, pc.z, 0.0, -pc.x, -pc.y, pc.x, 0.0);
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(step) = h.cholesky().map(|ch| ch.solve(&(-g))) else { break };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let d = step * alpha;
            let rot = Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner();
            let cand = Pose {
                rotation: nearest_rotation(&(rot * pose.rotation)),
                translation: rot * pose.translation + Vector3::new(d[3], d[4], d[5]),
            };
            let c = cost(&cand);
            if c < current {
                pose = cand;
                let done = current - c <= 1e-15 * current.max(1e-300) || step.norm() * alpha < 1e-14;
                current = c;
                improved = !done;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_error_deg;
    use rand::Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(320.0, 310.0, 128.0, 120.0, 256, 256).unwrap()
    }

    fn gt_pose() -> Pose {
        Pose {
            rotation: *Rotation3::from_euler_angles(0.4, -0.3, 0.9).matrix(),
            translation: Vector3::new(0.05, -0.1, 1.2),
        }
    }

    fn corrs(n: usize, seed: u64) -> Vec<Correspondence2D3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
                let pc = gt_pose().transform(&p);
                let px = k().denormalize(&Vector2::new(pc.x / pc.z, pc.y / pc.z));
                Correspondence2D3D::new(px, p)
            })
            .collect()
    }

    #[test]
    fn noiseless_pnp_is_exact() {
        let c = corrs(20, 5);
        let est = solve_pnp(&c, &k(), &RansacConfig::default()).unwrap();
        assert_eq!(est.num_inliers(), 20);
        for x in &c {
            assert!(reprojection_error(&est.pose, &k(), x) < 1e-6);
        }
        assert!(rotation_error_deg(&est.pose.rotation, &gt_pose().rotation).unwrap() < 1e-6);
        assert!((est.pose.translation - gt_pose().translation).norm() < 1e-8);
    }

    #[test]
    fn pnp_with_outliers() {
        let mut c = corrs(40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for x in c.iter_mut().take(12) {
            x.pixel = Vector2::new(rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0));
        }
        let est = solve_pnp(&c, &k(), &RansacConfig::default()).unwrap();
        assert!(rotation_error_deg(&est.pose.rotation, &gt_pose().rotation).unwrap() < 0.1);
        assert!((est.pose.translation - gt_pose().translation).norm() < 1e-3);
    }

    #[test]
    fn five_correspondences_rejected() {
        assert_eq!(
            solve_pnp(&corrs(5, 1), &k(), &RansacConfig::default()),
            Err(GeometryError::InsufficientCorrespondences { needed: 6, got: 5 })
        );
    }

    #[test]
    fn gauss_newton_recovers_from_perturbed_start() {
        let c = corrs(30, 8);
        let refs: Vec<&Correspondence2D3D> = c.iter().collect();
        let gt = gt_pose();
        let start = Pose {
            rotation: Rotation3::new(Vector3::new(0.02, -0.01, 0.03)).into_inner() * gt.rotation,
            translation: gt.translation + Vector3::new(0.01, 0.02, -0.03),
        };
        let refined = gauss_newton(&start, &refs, &k(), 50);
        assert!(rotation_error_deg(&refined.rotation, &gt.rotation).unwrap() < 1e-6);
    }
}
