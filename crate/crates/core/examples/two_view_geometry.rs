// Relative pose from noiseless correspondences, then PnP against the same
// points, both checked with the rotation-error metric.

use lfm3d::geometry::{
    estimate_essential, recover_relative_pose, rotation_error_deg, solve_pnp, Camera, Correspondence2D2D,
    Correspondence2D3D, Intrinsics, Pose, RansacConfig,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let k = Intrinsics::new(220.0, 220.0, 128.0, 128.0, 256, 256)?;
    let up = Vector3::new(0.0, 0.0, 1.0);
    let cam_a = Camera::look_at(k, &Vector3::new(0.5, 0.0, 0.2), &Vector3::zeros(), &up)?;
    let cam_b = Camera::look_at(k, &Vector3::new(0.0, 0.5, 0.25), &Vector3::zeros(), &up)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vector3<f64>> =
        (0..60).map(|_| Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1))).collect();
    let mut two_view = Vec::new();
    let mut to_a = Vec::new();
    for p in &points {
        let (pa, _) = cam_a.project(p)?;
        let (pb, _) = cam_b.project(p)?;
        two_view.push(Correspondence2D2D::new(pa, pb));
        to_a.push(Correspondence2D3D::new(pa, *p));
    }

    let truth = Pose::relative(&cam_a, &cam_b);
    let est = estimate_essential(&two_view, &k, &k, &RansacConfig::default())?;
    let pose = recover_relative_pose(&est.essential, &est.inlier_correspondences(&two_view), &k, &k)?;
    let relative_err = rotation_error_deg(&pose.rotation, &truth.rotation)?;
    println!("essential: {} inliers, rotation error {relative_err:.2e} deg", est.num_inliers());

    let pnp = solve_pnp(&to_a, &k, &RansacConfig::default())?;
    let pnp_err = rotation_error_deg(&pnp.pose.rotation, &cam_a.rotation)?;
    println!("pnp: {} inliers, rotation error {pnp_err:.2e} deg", pnp.num_inliers());
    Ok((relative_err, pnp_err))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
