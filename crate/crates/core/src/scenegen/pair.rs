use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cameras::{baseline_angle_deg, sample_camera_pair, CameraConfig};
use super::labels::{label_ground_truth, MatchLabels};
use super::object::{generate_object, ClassConfig, ShapeFamily};
use super::render::{render_view, NoiseConfig, View};
use super::signal::{corrupt_3d_signal, normalize_relative, SignalNoiseConfig};
use super::SceneError;
use crate::encoding::{sample_map_bilinear_into, DenseMap3D, EncoderInput};
use crate::geometry::Pose;
use crate::matcher::{SignalMode, TrainSample};

/// Training pairs span 15–75°, the wide-baseline evaluation split 90–120°.
pub const TRAIN_BASELINE: (f64, f64) = (15.0, 75.0);
pub const EVAL_BASELINE: (f64, f64) = (90.0, 120.0);

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub id: u64,
    pub object_id: u64,
    pub class: ShapeFamily,
    pub view_a: View,
    pub view_b: View,
    pub labels: MatchLabels,
    /// Takes camera-A coordinates to camera-B coordinates.
    pub relative_pose: Pose,
    pub baseline_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub class: ClassConfig,
    pub baseline_deg: (f64, f64),
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    /// Estimated-signal corruption; `None` keeps ground-truth maps.
    pub signal_noise: Option<SignalNoiseConfig>,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            class: ClassConfig::default(),
            baseline_deg: TRAIN_BASELINE,
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
            signal_noise: Some(SignalNoiseConfig::default()),
        }
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MAX_CAMERA_ATTEMPTS: u64 = 32;

/// One object, two cameras, two rendered views, GT labels and (optionally)
/// estimated 3D signals. Camera pairs that leave either view with too few
/// visible points are redrawn.
pub fn generate_pair(cfg: &PairConfig, seed: u64) -> Result<ScenePair, SceneError> {
    let object_id = derive_seed(seed, 1);
    let object = generate_object(&cfg.class, object_id)?;
    let mut last_err = None;
    for attempt in 0..MAX_CAMERA_ATTEMPTS {
        let (cam_a, cam_b) = sample_camera_pair(&object, cfg.baseline_deg, &cfg.camera, derive_seed(seed, 16 + attempt))?;
        let views = render_view(&object, &cam_a, &cfg.noise, derive_seed(seed, 2))
            .and_then(|a| Ok((a, render_view(&object, &cam_b, &cfg.noise, derive_seed(seed, 3))?)));
        let (mut view_a, mut view_b) = match views {
            Ok(v) => v,
            Err(e @ SceneError::ObjectNotVisible { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let labels = label_ground_truth(&view_a, &view_b)?;
        if let Some(noise) = &cfg.signal_noise {
            view_a = corrupt_3d_signal(&view_a, noise, derive_seed(seed, 4));
            view_b = corrupt_3d_signal(&view_b, noise, derive_seed(seed, 5));
        }
        return Ok(ScenePair {
            id: seed,
            object_id,
            class: cfg.class.family,
            relative_pose: Pose::relative(&cam_a, &cam_b),
            baseline_deg: baseline_angle_deg(&cam_a, &cam_b),
            view_a,
            view_b,
            labels,
        });
    }
    Err(last_err.unwrap_or(SceneError::ObjectNotVisible { visible: 0, needed: cfg.noise.min_visible }))
}

/// Seed of the `index`-th pair of a dataset.
pub fn pair_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_seed(dataset_seed, 0x1000 + index as u64)
}

pub fn generate_dataset(cfg: &PairConfig, count: usize, seed: u64) -> Result<Vec<ScenePair>, SceneError> {
    (0..count).into_par_iter().map(|k| generate_pair(cfg, pair_seed(seed, k))).collect()
}

fn lookup(map: &DenseMap3D, view: &View) -> Array2<f64> {
    let (w, h) = ((view.width() - 1) as f64, (view.height() - 1) as f64);
    let mut out = Array2::zeros((view.features.len(), map.channels));
    let mut buf = vec![0.0; map.channels];
    for (i, f) in view.features.iter().enumerate() {
        sample_map_bilinear_into(map, f.x.clamp(0.0, w), f.y.clamp(0.0, h), &mut buf).expect("clamped into the map");
        for (c, v) in buf.iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    out
}

/// Per-keypoint 3D signal read from the view's maps: NOCS directly, MDE as
/// min-max normalized inverse depth.
pub fn keypoint_signal(view: &View, mode: SignalMode) -> Option<Array2<f64>> {
    match mode {
        SignalMode::None => None,
        SignalMode::Nocs => Some(lookup(&view.nocs, view)),
        SignalMode::Mde => Some(lookup(&normalize_relative(&view.inverse_depth), view)),
    }
}

pub fn encoder_input(view: &View, mode: SignalMode) -> EncoderInput {
    let mut input = EncoderInput::from_features(&view.features, view.width(), view.height())
        .expect("rendered features share one descriptor width");
    input.signal = keypoint_signal(view, mode);
    input
}

impl ScenePair {
    pub fn train_sample(&self, mode: SignalMode) -> TrainSample {
        TrainSample { a: encoder_input(&self.view_a, mode), b: encoder_input(&self.view_b, mode), labels: self.labels.clone() }
    }

    /// Drops every 3D signal map except the one `mode` reads; depth stays as
    /// the object mask.
    pub fn retain_signal(&self, mode: SignalMode) -> ScenePair {
        let empty = |m: &DenseMap3D| DenseMap3D::filled(0, 0, m.fill.clone());
        let strip = |v: &View| View {
            nocs: if mode == SignalMode::Nocs { v.nocs.clone() } else { empty(&v.nocs) },
            inverse_depth: if mode == SignalMode::Mde { v.inverse_depth.clone() } else { empty(&v.inverse_depth) },
            ..v.clone()
        };
        ScenePair { view_a: strip(&self.view_a), view_b: strip(&self.view_b), ..self.clone() }
    }

    /// Whether both views still carry the map `mode` reads.
    pub fn has_signal(&self, mode: SignalMode) -> bool {
        let present = |v: &View| match mode {
            SignalMode::None => true,
            SignalMode::Nocs => !v.nocs.data.is_empty(),
            SignalMode::Mde => !v.inverse_depth.data.is_empty(),
        };
        present(&self.view_a) && present(&self.view_b)
    }

    /// Keeps the `count` most confident keypoints per view and the labels
    /// among them.
    pub fn truncated(&self, count: usize) -> ScenePair {
        let mut out = self.clone();
        out.view_a.truncate_features(count);
        out.view_b.truncate_features(count);
        out.labels = self.labels.truncated(out.view_a.features.len(), out.view_b.features.len());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(baseline: (f64, f64)) -> PairConfig {
        PairConfig {
            class: ClassConfig { num_points: 500, ..ClassConfig::default() },
            baseline_deg: baseline,
            ..PairConfig::default()
        }
    }

    #[test]
    fn pair_invariants_hold() {
        for s in 0..5 {
            let p = generate_pair(&small(TRAIN_BASELINE), s).unwrap();
            let axes = baseline_angle_deg(&p.view_a.camera, &p.view_b.camera);
            assert!((p.baseline_deg - axes).abs() < 1e-6);
            assert!((15.0..=75.0).contains(&p.baseline_deg));
            let mut seen_a = std::collections::HashSet::new();
            let mut seen_b = std::collections::HashSet::new();
            for &(i, j) in &p.labels.matches {
                assert!(seen_a.insert(i) && seen_b.insert(j));
                assert!(!p.labels.unmatched_a.contains(&i));
            }
            assert!(p.view_a.estimated && p.view_b.estimated);
        }
    }

    #[test]
    fn matches_link_nearby_surface_points() {
        let cfg = PairConfig { signal_noise: None, ..small((15.0, 30.0)) };
        let p = generate_pair(&cfg, 3).unwrap();
        let object = generate_object(&cfg.class, p.object_id).unwrap();
        assert!(p.labels.matches.len() > 20);
        let (mut same, mut near) = (0, 0);
        for &(i, j) in &p.labels.matches {
            let (Some(a), Some(b)) = (p.view_a.point_ids[i], p.view_b.point_ids[j]) else { continue };
            same += (a == b) as usize;
            near += ((object.world_point(a as usize) - object.world_point(b as usize)).norm() < 0.02) as usize;
        }
        let n = p.labels.matches.len() as f64;
        assert!(same as f64 >= 0.75 * n, "{same}/{n}");
        assert!(near as f64 >= 0.95 * n, "{near}/{n}");
    }

    #[test]
    fn swapping_views_transposes_the_labels() {
        let p = generate_pair(&small(TRAIN_BASELINE), 8).unwrap();
        let back = label_ground_truth(&p.view_b, &p.view_a).unwrap();
        let mut forward = label_ground_truth(&p.view_a, &p.view_b).unwrap();
        forward = forward.swapped();
        assert_eq!(back, forward);
    }

    #[test]
    fn matched_fraction_shrinks_with_baseline() {
        let frac = |range| {
            let mut m = 0.0;
            for s in 0..100 {
                let p = generate_pair(&PairConfig { signal_noise: None, ..small(range) }, s).unwrap();
                m += p.labels.matches.len() as f64 / p.view_a.features.len() as f64;
            }
            m / 100.0
        };
        let narrow = frac((15.0, 30.0));
        let mid = frac((45.0, 60.0));
        let wide = frac(EVAL_BASELINE);
        assert!(narrow > mid && mid > wide, "{narrow} {mid} {wide}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(EVAL_BASELINE);
        assert_eq!(generate_pair(&cfg, 11).unwrap(), generate_pair(&cfg, 11).unwrap());
    }

    #[test]
    fn train_sample_reads_fill_values_for_distractors() {
        let p = generate_pair(&small(TRAIN_BASELINE), 2).unwrap();
        let s = p.train_sample(SignalMode::Nocs);
        let sig = s.a.signal.as_ref().unwrap();
        assert_eq!(sig.ncols(), 3);
        let mut found = false;
        for (i, id) in p.view_a.point_ids.iter().enumerate() {
            let f = &p.view_a.features[i];
            let (x, y) = (f.x.round() as u32, f.y.round() as u32);
            let far = (x.saturating_sub(2)..=x + 2).all(|u| (y.saturating_sub(2)..=y + 2).all(|v| !p.view_a.on_mask(u, v)));
            if id.is_none() && far {
                assert!(sig.row(i).iter().all(|&v| v == 0.5));
                found = true;
            }
        }
        assert!(found);
        let mde = p.train_sample(SignalMode::Mde);
        assert!(mde.a.signal.unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.train_sample(SignalMode::None).a.signal.is_none());
    }
}
