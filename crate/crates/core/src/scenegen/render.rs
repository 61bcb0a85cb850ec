use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::object::{random_unit, SyntheticObject};
use super::SceneError;
use crate::encoding::{DenseMap3D, LocalFeature};
use crate::geometry::Camera;

pub const NOCS_FILL: [f32; 3] = [0.5, 0.5, 0.5];
pub const INVERSE_DEPTH_FILL: f32 = 0.0;

/// Detector and descriptor degradation applied while rendering a view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Isotropic per-component descriptor noise before renormalization.
    pub descriptor_sigma: f64,
    /// Descriptor rotation in radians per radian of view obliquity.
    pub view_gain: f64,
    pub keypoint_jitter_px: f64,
    /// Minimum spacing between kept keypoints; stronger ones suppress weaker.
    pub nms_radius_px: f64,
    pub num_distractors: usize,
    pub max_keypoints: usize,
    pub min_visible: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            descriptor_sigma: 0.03,
            view_gain: 0.5,
            keypoint_jitter_px: 0.5,
            nms_radius_px: 3.0,
            num_distractors: 16,
            max_keypoints: 1024,
            min_visible: 50,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { descriptor_sigma: 0.0, view_gain: 0.0, keypoint_jitter_px: 0.0, num_distractors: 0, ..Self::default() }
    }
}

/// One rendered image's worth of observations. Depth stays ground truth; the
/// NOCS and inverse-depth maps are replaced by estimates once `estimated` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    /// Sorted by decreasing confidence; `signal` is left empty.
    pub features: Vec<LocalFeature>,
    /// Generating surface point of each feature, `None` for distractors.
    pub point_ids: Vec<Option<u32>>,
    /// Metric depth; its validity mask is the object mask.
    pub depth: DenseMap3D,
    pub nocs: DenseMap3D,
    pub inverse_depth: DenseMap3D,
    pub estimated: bool,
}

impl View {
    pub fn width(&self) -> u32 {
        self.camera.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.camera.intrinsics.height
    }

    pub fn on_mask(&self, x: u32, y: u32) -> bool {
        self.depth.is_valid(x, y)
    }

    pub fn mask_size(&self) -> usize {
        self.depth.num_valid()
    }

    /// Keeps the `count` most confident features.
    pub fn truncate_features(&mut self, count: usize) {
        self.features.truncate(count);
        self.point_ids.truncate(count);
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Pixel bounding box of the object's world-space cube, clipped to the image.
fn object_bbox(camera: &Camera) -> Option<(u32, u32, u32, u32)> {
    let h = super::object::OBJECT_SIZE / 2.0;
    let (w, ht) = (camera.intrinsics.width, camera.intrinsics.height);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..8 {
        let corner = Vector3::new(
            if i & 1 == 0 { -h } else { h },
            if i & 2 == 0 { -h } else { h },
            if i & 4 == 0 { -h } else { h },
        );
        let (px, _) = camera.project(&corner).ok()?;
        x0 = x0.min(px.x);
        y0 = y0.min(px.y);
        x1 = x1.max(px.x);
        y1 = y1.max(px.y);
    }
    let clamp = |v: f64, hi: u32| v.clamp(0.0, (hi - 1) as f64);
    Some((clamp(x0.floor(), w) as u32, clamp(y0.floor(), ht) as u32, clamp(x1.ceil(), w) as u32, clamp(y1.ceil(), ht) as u32))
}

/// World-space ray through `pixel`, scaled so the parameter equals camera depth.
pub(crate) fn pixel_ray(camera: &Camera, pixel: &Vector2<f64>) -> Vector3<f64> {
    let xy = camera.intrinsics.normalize(pixel);
    camera.rotation.transpose() * Vector3::new(xy.x, xy.y, 1.0)
}

fn rasterize(object: &SyntheticObject, camera: &Camera) -> (DenseMap3D, DenseMap3D, DenseMap3D) {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut depth = DenseMap3D::filled(w, h, vec![0.0]);
    let mut nocs = DenseMap3D::filled(w, h, NOCS_FILL.to_vec());
    let mut inv = DenseMap3D::filled(w, h, vec![INVERSE_DEPTH_FILL]);
    if let Some((x0, y0, x1, y1)) = object_bbox(camera) {
        let eye = camera.center();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dir = pixel_ray(camera, &Vector2::new(x as f64, y as f64));
                if let Some(t) = object.ray_cast(&eye, &dir) {
                    let n = SyntheticObject::to_nocs(&(eye + dir * t));
                    depth.set(x, y, &[t as f32]);
                    nocs.set(x, y, &[n.x.clamp(0.0, 1.0) as f32, n.y.clamp(0.0, 1.0) as f32, n.z.clamp(0.0, 1.0) as f32]);
                    inv.set(x, y, &[(1.0 / t) as f32]);
                }
            }
        }
    }
    depth.crop_to_valid();
    nocs.crop_to_valid();
    inv.crop_to_valid();
    (depth, nocs, inv)
}

/// Observed descriptor of point `i` seen along unit direction `to_camera`.
fn observe_descriptor<R: Rng>(
    object: &SyntheticObject,
    i: usize,
    to_camera: &Vector3<f64>,
    obliquity: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Vec<f64> {
    let d = object.descriptor_dim();
    let latent = object.descriptors.row(i);
    let basis = object.view_basis.row(i);
    let mut out: Vec<f64> = latent.to_vec();
    let theta = noise.view_gain * obliquity;
    if theta != 0.0 {
        let mut drift: Vec<f64> = (0..d)
            .map(|k| to_camera.x * basis[k] + to_camera.y * basis[d + k] + to_camera.z * basis[2 * d + k])
            .collect();
        let along: f64 = drift.iter().zip(latent.iter()).map(|(a, b)| a * b).sum();
        drift.iter_mut().zip(latent.iter()).for_each(|(a, b)| *a -= along * b);
        let n = drift.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            for (k, o) in out.iter_mut().enumerate() {
                *o = theta.cos() * latent[k] + theta.sin() * drift[k] / n;
            }
        }
    }
    if noise.descriptor_sigma > 0.0 {
        for o in out.iter_mut() {
            *o += noise.descriptor_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    out.into_iter().map(|x| round_f32(x / n)).collect()
}

/// Renders depth, NOCS and inverse-depth maps by ray casting and extracts
/// keypoints from the visible surface points: a point is visible when it
/// faces the camera and is the first surface hit along its pixel ray.
pub fn render_view(object: &SyntheticObject, camera: &Camera, noise: &NoiseConfig, seed: u64) -> Result<View, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (depth, nocs, inverse_depth) = rasterize(object, camera);
    let eye = camera.center();
    let k = &camera.intrinsics;
    let max_xy = Vector2::new((k.width - 1) as f64, (k.height - 1) as f64);

    let mut features = Vec::new();
    let mut point_ids = Vec::new();
    for i in 0..object.len() {
        let p = object.world_point(i);
        let to_camera = (eye - p).normalize();
        let cos = object.normals[i].dot(&to_camera);
        if cos <= 1e-6 {
            continue;
        }
        let Ok((pixel, z)) = camera.project(&p) else { continue };
        if !k.contains(&pixel) {
            continue;
        }
        let hit = object.ray_cast(&eye, &pixel_ray(camera, &pixel));
        if !hit.is_some_and(|t| t >= z * (1.0 - 1e-9) - 1e-12) {
            continue;
        }
        let obliquity = cos.clamp(-1.0, 1.0).acos();
        let descriptor = observe_descriptor(object, i, &to_camera, obliquity, noise, &mut rng);
        let mut jitter = Vector2::zeros();
        if noise.keypoint_jitter_px > 0.0 {
            jitter = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * noise.keypoint_jitter_px;
        }
        let pos = (pixel + jitter).sup(&Vector2::zeros()).inf(&max_xy);
        let confidence = (object.base_confidence[i] * cos.sqrt()).clamp(1e-3, 1.0);
        features.push(LocalFeature {
            x: round_f32(pos.x),
            y: round_f32(pos.y),
            confidence: round_f32(confidence),
            descriptor,
            signal: Vec::new(),
        });
        point_ids.push(Some(i as u32));
    }
    if features.len() < noise.min_visible {
        return Err(SceneError::ObjectNotVisible { visible: features.len(), needed: noise.min_visible });
    }

    let d = object.descriptor_dim();
    for _ in 0..noise.num_distractors {
        for _ in 0..1000 {
            let x = rng.gen_range(0.0..=max_xy.x);
            let y = rng.gen_range(0.0..=max_xy.y);
            if depth.is_valid(x.round() as u32, y.round() as u32) {
                continue;
            }
            let descriptor = random_unit(&mut rng, d).into_iter().map(round_f32).collect();
            let confidence = round_f32(rng.gen_range(0.05..0.6));
            features.push(LocalFeature { x: round_f32(x), y: round_f32(y), confidence, descriptor, signal: Vec::new() });
            point_ids.push(None);
            break;
        }
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| features[b].confidence.total_cmp(&features[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len().min(noise.max_keypoints));
    let r2 = noise.nms_radius_px * noise.nms_radius_px;
    for &i in &order {
        if kept.len() == noise.max_keypoints {
            break;
        }
        let (x, y) = (features[i].x, features[i].y);
        if kept.iter().all(|&k| (features[k].x - x).powi(2) + (features[k].y - y).powi(2) >= r2) {
            kept.push(i);
        }
    }
    let order = kept;
    let features = order.iter().map(|&i| features[i].clone()).collect();
    let point_ids = order.iter().map(|&i| point_ids[i]).collect();
    Ok(View { camera: *camera, features, point_ids, depth, nocs, inverse_depth, estimated: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::scenegen::{generate_object, ClassConfig};

    fn setup() -> (SyntheticObject, Camera) {
        let obj = generate_object(&ClassConfig { num_points: 600, ..ClassConfig::default() }, 7).unwrap();
        let k = Intrinsics::new(230.0, 230.0, 128.0, 128.0, 256, 256).unwrap();
        let cam = Camera::look_at(k, &Vector3::new(0.1, -0.6, 0.3), &Vector3::zeros(), &Vector3::z()).unwrap();
        (obj, cam)
    }

    #[test]
    fn zero_noise_descriptors_equal_latents() {
        let (obj, cam) = setup();
        let view = render_view(&obj, &cam, &NoiseConfig::zero(), 1).unwrap();
        for (f, id) in view.features.iter().zip(&view.point_ids) {
            let latent = obj.descriptors.row(id.unwrap() as usize);
            for (a, b) in f.descriptor.iter().zip(latent.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nocs_map_matches_generating_points() {
        let (obj, cam) = setup();
        let view = render_view(&obj, &cam, &NoiseConfig::zero(), 1).unwrap();
        let mut checked = 0;
        for (f, id) in view.features.iter().zip(&view.point_ids) {
            let i = id.unwrap() as usize;
            let (x, y) = (f.x.round() as u32, f.y.round() as u32);
            let z = cam.to_camera_frame(&obj.world_point(i)).z;
            // Skip texels next to silhouettes or depth discontinuities.
            let smooth = (x.saturating_sub(1)..=x + 1).all(|u| {
                (y.saturating_sub(1)..=y + 1)
                    .all(|v| view.on_mask(u, v) && (view.depth.texel(u, v)[0] as f64 - z).abs() < 0.01 * z)
            });
            let cos = obj.normals[i].dot(&(cam.center() - obj.world_point(i)).normalize());
            if !smooth || cos < 0.2 {
                continue;
            }
            // The texel center is within sqrt(2)/2 px of the feature; one pixel
            // spans z / f meters on a fronto-parallel surface.
            let footprint = 0.5f64.sqrt() * z / cam.intrinsics.fx / crate::scenegen::OBJECT_SIZE / cos;
            let got = view.nocs.texel(x, y);
            let err = (Vector3::new(got[0] as f64, got[1] as f64, got[2] as f64) - obj.points[i]).norm();
            assert!(err <= footprint + 1e-5, "err {err} footprint {footprint}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn inverse_depth_is_reciprocal_depth() {
        let (obj, cam) = setup();
        let view = render_view(&obj, &cam, &NoiseConfig::default(), 1).unwrap();
        assert!(view.mask_size() > 1000);
        for (x, y, d) in view.depth.valid_texels() {
            assert!(view.inverse_depth.is_valid(x, y) && view.nocs.is_valid(x, y));
            assert!(d[0] > 0.0);
            let inv = view.inverse_depth.texel(x, y)[0];
            assert!((inv - (1.0 / d[0] as f64) as f32).abs() <= f32::EPSILON * inv);
        }
        assert_eq!(view.nocs.texel(0, 0), &NOCS_FILL);
    }

    #[test]
    fn visible_features_are_on_mask_and_distractors_off_mask() {
        let (obj, cam) = setup();
        let noise = NoiseConfig { keypoint_jitter_px: 0.0, ..NoiseConfig::default() };
        let view = render_view(&obj, &cam, &noise, 2).unwrap();
        let mut distractors = 0;
        for (f, id) in view.features.iter().zip(&view.point_ids) {
            let on = view.on_mask(f.x.round() as u32, f.y.round() as u32);
            match id {
                Some(_) => assert!(f.confidence > 0.0 && f.confidence <= 1.0),
                None => {
                    assert!(!on);
                    distractors += 1;
                }
            }
        }
        assert!(distractors > 0 && distractors <= noise.num_distractors);
        assert!(view.features.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn keypoint_cap_and_visibility_errors() {
        let (obj, cam) = setup();
        let view = render_view(&obj, &cam, &NoiseConfig { max_keypoints: 40, ..NoiseConfig::default() }, 3).unwrap();
        assert_eq!(view.features.len(), 40);
        let k = cam.intrinsics;
        let away = Camera::look_at(k, &Vector3::new(0.0, -0.6, 0.0), &Vector3::new(0.0, -2.0, 0.0), &Vector3::z()).unwrap();
        assert!(matches!(
            render_view(&obj, &away, &NoiseConfig::default(), 0),
            Err(SceneError::ObjectNotVisible { visible: 0, .. })
        ));
    }

    #[test]
    fn rendering_is_seed_deterministic() {
        let (obj, cam) = setup();
        let a = render_view(&obj, &cam, &NoiseConfig::default(), 9).unwrap();
        let b = render_view(&obj, &cam, &NoiseConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
