// Heuristic matchers and NOCS-based pose baselines on one wide-baseline
// pair.

use lfm3d::baselines::{filter_by_nocs_distance, match_mnn, match_ratio, nocs_pnp_ransac, relative_pose_from_nocs, PnpMode};
use lfm3d::evaluation::score_matches;
use lfm3d::geometry::rotation_error_deg;
use lfm3d::matcher::SignalMode;
use lfm3d::scenegen::{encoder_input, generate_pair, PairConfig, EVAL_BASELINE};
use nalgebra::Vector2;

pub fn run_example() -> Result<Vec<usize>, Box<dyn std::error::Error>> {
    let cfg = PairConfig { baseline_deg: EVAL_BASELINE, ..PairConfig::default() };
    let pair = generate_pair(&cfg, 21)?;
    let (a, b) = (encoder_input(&pair.view_a, SignalMode::None), encoder_input(&pair.view_b, SignalMode::None));
    let gt = &pair.labels.matches;

    let mnn = match_mnn(a.descriptors.view(), b.descriptors.view())?;
    let ratio = match_ratio(a.descriptors.view(), b.descriptors.view(), 0.8)?;
    let keypoints = |v: &lfm3d::scenegen::View| v.features.iter().map(|f| Vector2::new(f.x, f.y)).collect::<Vec<_>>();
    let (kp_a, kp_b) = (keypoints(&pair.view_a), keypoints(&pair.view_b));
    let mut survivors = Vec::new();
    for (name, matches) in [("mnn", &mnn), ("ratio", &ratio)] {
        let c = score_matches(matches, gt, a.len(), b.len())?;
        println!("{name}: {} of {} correct, {} ground-truth matches", c.num_correct, c.num_predicted, c.num_gt);
    }
    for d in [0.05, 0.1, 0.2] {
        let kept = filter_by_nocs_distance(&mnn, &kp_a, &kp_b, &pair.view_a.nocs, &pair.view_b.nocs, d)?;
        let c = score_matches(&kept, gt, a.len(), b.len())?;
        println!("mnn within NOCS distance {d}: {} of {} correct", c.num_correct, c.num_predicted);
        survivors.push(kept.len());
    }

    for mode in [PnpMode::Sparse, PnpMode::Dense] {
        let pose = relative_pose_from_nocs(&pair.view_a, &pair.view_b, mode, &nocs_pnp_ransac(1))?;
        let err = rotation_error_deg(&pose.rotation, &pair.relative_pose.rotation)?;
        println!("{mode:?} PnP on estimated NOCS: rotation error {err:.1} deg");
    }
    Ok(survivors)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
