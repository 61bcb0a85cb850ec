use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Edge length in meters of the world-space cube the unit NOCS cube maps to.
pub const OBJECT_SIZE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    ShoeLike,
    CameraLike,
}

impl ShapeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::ShoeLike => "shoe-like",
            ShapeFamily::CameraLike => "camera-like",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ShapeFamily::ShoeLike => 0,
            ShapeFamily::CameraLike => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShapeFamily::ShoeLike),
            1 => Some(ShapeFamily::CameraLike),
            _ => None,
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shoe-like" => Ok(ShapeFamily::ShoeLike),
            "camera-like" => Ok(ShapeFamily::CameraLike),
            other => Err(format!("unknown class {other:?}, expected shoe-like or camera-like")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassConfig {
    pub family: ShapeFamily,
    pub num_points: usize,
    pub descriptor_dim: usize,
    /// Number of shared descriptor "words" reused across the surface.
    pub vocabulary: usize,
    /// Weight of the shared word against the per-point component.
    pub word_weight: f64,
}

impl Default for ClassConfig {
    fn default() -> Self {
        Self { family: ShapeFamily::ShoeLike, num_points: 800, descriptor_dim: 64, vocabulary: 32, word_weight: 0.6 }
    }
}

impl ClassConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_points == 0 || self.descriptor_dim < 2 || self.vocabulary == 0 {
            return Err(SceneError::InvalidConfig(format!(
                "points {}, descriptor dim {}, vocabulary {} must all be positive (dim >= 2)",
                self.num_points, self.descriptor_dim, self.vocabulary
            )));
        }
        if !(0.0..1.0).contains(&self.word_weight) {
            return Err(SceneError::InvalidConfig(format!("word weight {} not in [0, 1)", self.word_weight)));
        }
        Ok(())
    }
}

/// Oriented ellipsoid in NOCS coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    /// Columns are the local axes.
    pub axes: Matrix3<f64>,
    pub radii: Vector3<f64>,
}

impl Ellipsoid {
    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.axes.transpose() * (p - self.center)).component_div(&self.radii)
    }

    /// Implicit value; `< 1` inside.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        self.local(p).norm_squared()
    }

    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.local(p).component_div(&self.radii);
        (self.axes * q).normalize()
    }

    /// Nearest positive ray parameter of `origin + t * dir`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.local(origin);
        let d = (self.axes.transpose() * dir).component_div(&self.radii);
        let a = d.norm_squared();
        let b = o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let t0 = (-b - s) / a;
        let t1 = (-b + s) / a;
        if t0 > 0.0 {
            Some(t0)
        } else if t1 > 0.0 {
            Some(t1)
        } else {
            None
        }
    }

    /// Half extents of the axis-aligned bounding box.
    fn half_extent(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| (0..3).map(|k| (self.axes[(i, k)] * self.radii[k]).powi(2)).sum::<f64>().sqrt())
    }

    /// Knud Thomsen's surface-area approximation.
    fn area(&self) -> f64 {
        let p = 1.6075;
        let (a, b, c) = (self.radii.x.powf(p), self.radii.y.powf(p), self.radii.z.powf(p));
        4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
    }

    /// Area-uniform surface sample by rejection on the sphere map.
    fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        let r = self.radii;
        let mu_max = (r.y * r.z).max(r.x * r.z).max(r.x * r.y);
        loop {
            let u = random_unit3(rng);
            let mu = ((r.y * r.z * u.x).powi(2) + (r.x * r.z * u.y).powi(2) + (r.x * r.y * u.z).powi(2)).sqrt();
            if rng.gen::<f64>() * mu_max <= mu {
                return self.center + self.axes * u.component_mul(&r);
            }
        }
    }
}

pub(crate) fn random_unit3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    }
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub object_id: u64,
    pub class: ShapeFamily,
    pub parts: Vec<Ellipsoid>,
    /// NOCS coordinates in `[0, 1]^3`.
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// `num_points × D`, unit rows.
    pub descriptors: Array2<f64>,
    /// Per-point detector response before view effects.
    pub base_confidence: Vec<f64>,
    /// `num_points × 3D`: three unit directions per point that a view
    /// direction mixes into the descriptor's drift direction.
    pub view_basis: Array2<f64>,
}

impl SyntheticObject {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// World coordinates of a NOCS point; the object is centered at the origin.
    pub fn to_world(nocs: &Vector3<f64>) -> Vector3<f64> {
        (nocs - Vector3::repeat(0.5)) * OBJECT_SIZE
    }

    pub fn to_nocs(world: &Vector3<f64>) -> Vector3<f64> {
        world / OBJECT_SIZE + Vector3::repeat(0.5)
    }

    pub fn world_point(&self, i: usize) -> Vector3<f64> {
        Self::to_world(&self.points[i])
    }

    /// First surface hit of a world-space ray, as the ray parameter.
    pub fn ray_cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = Self::to_nocs(origin);
        let d = dir / OBJECT_SIZE;
        self.parts.iter().filter_map(|p| p.intersect(&o, &d)).min_by(f64::total_cmp)
    }

    /// Radius of a world-space sphere around the origin enclosing the object.
    pub fn bounding_radius(&self) -> f64 {
        OBJECT_SIZE * 3f64.sqrt() / 2.0
    }
}

struct PartSpec {
    center: [f64; 3],
    radii: [f64; 3],
    /// Pitch about the lateral axis, degrees.
    pitch: f64,
}

fn family_parts(family: ShapeFamily) -> Vec<PartSpec> {
    let p = |center, radii, pitch| PartSpec { center, radii, pitch };
    // x forward, y left, z up.
    match family {
        ShapeFamily::ShoeLike => vec![
            p([0.0, 0.0, 0.1], [1.0, 0.38, 0.12], 0.0),
            p([0.45, 0.0, 0.25], [0.5, 0.33, 0.2], -8.0),
            p([-0.55, 0.0, 0.45], [0.38, 0.32, 0.42], 0.0),
            p([-0.15, 0.0, 0.5], [0.28, 0.24, 0.22], 30.0),
            p([0.1, 0.3, 0.22], [0.25, 0.1, 0.12], 0.0),
        ],
        ShapeFamily::CameraLike => vec![
            p([0.0, 0.0, 0.0], [0.35, 0.9, 0.55], 0.0),
            p([0.5, 0.2, -0.02], [0.45, 0.3, 0.3], 0.0),
            p([0.15, -0.7, -0.05], [0.3, 0.22, 0.5], 0.0),
            p([0.0, 0.2, 0.55], [0.3, 0.3, 0.25], 0.0),
            p([-0.05, -0.5, 0.55], [0.15, 0.15, 0.08], 0.0),
        ],
    }
}

/// Shared descriptor vocabulary of a class; identical for every instance.
fn vocabulary(cfg: &ClassConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + cfg.family.code() as u64);
    (0..cfg.vocabulary).map(|_| random_unit(&mut rng, cfg.descriptor_dim)).collect()
}

/// Builds one instance of the class: jittered ellipsoid parts fitted into the
/// unit cube, area-uniform surface points (interior points of overlapping
/// parts removed), latent descriptors and per-point view bases.
pub fn generate_object(cfg: &ClassConfig, seed: u64) -> Result<SyntheticObject, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Ellipsoid> = family_parts(cfg.family)
        .into_iter()
        .map(|s| {
            let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(0.85..1.15);
            let radii = Vector3::new(s.radii[0] * jitter(&mut rng), s.radii[1] * jitter(&mut rng), s.radii[2] * jitter(&mut rng));
            let center = Vector3::new(
                s.center[0] + rng.gen_range(-0.04..0.04),
                s.center[1] + rng.gen_range(-0.04..0.04),
                s.center[2] + rng.gen_range(-0.04..0.04),
            );
            let pitch = (s.pitch + rng.gen_range(-5.0..5.0)).to_radians();
            let axes = *Rotation3::from_axis_angle(&Vector3::y_axis(), pitch).matrix();
            Ellipsoid { center, axes, radii }
        })
        .collect();

    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in &parts {
        let h = p.half_extent();
        lo = lo.inf(&(p.center - h));
        hi = hi.sup(&(p.center + h));
    }
    let scale = 1.0 / (hi - lo).max();
    let mid = (lo + hi) / 2.0;
    for p in &mut parts {
        p.center = (p.center - mid) * scale + Vector3::repeat(0.5);
        p.radii *= scale;
    }

    let areas: Vec<f64> = parts.iter().map(Ellipsoid::area).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(cfg.num_points);
    let mut normals = Vec::with_capacity(cfg.num_points);
    let mut attempts = 0usize;
    while points.len() < cfg.num_points {
        attempts += 1;
        if attempts > 1000 * cfg.num_points {
            return Err(SceneError::InvalidConfig("surface sampling did not converge".into()));
        }
        let mut pick = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < parts.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let x = parts[k].sample_surface(&mut rng);
        let buried = parts.iter().enumerate().any(|(j, p)| j != k && p.implicit(&x) < 1.0 - 1e-9);
        let inside_cube = x.iter().all(|c| (0.0..=1.0).contains(c));
        if buried || !inside_cube {
            continue;
        }
        points.push(x);
        normals.push(parts[k].normal(&x));
    }

    let words = vocabulary(cfg);
    let d = cfg.descriptor_dim;
    let mut descriptors = Array2::zeros((cfg.num_points, d));
    let mut view_basis = Array2::zeros((cfg.num_points, 3 * d));
    let mut base_confidence = Vec::with_capacity(cfg.num_points);
    let w = cfg.word_weight;
    for i in 0..cfg.num_points {
        let word = &words[rng.gen_range(0..words.len())];
        let unique = random_unit(&mut rng, d);
        let mut v: Vec<f64> = word.iter().zip(&unique).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        for (k, x) in v.into_iter().enumerate() {
            descriptors[(i, k)] = x;
        }
        for b in 0..3 {
            for (k, x) in random_unit(&mut rng, d).into_iter().enumerate() {
                view_basis[(i, b * d + k)] = x;
            }
        }
        base_confidence.push(rng.gen_range(0.3..1.0));
    }
    Ok(SyntheticObject {
        object_id: seed,
        class: cfg.family,
        parts,
        points,
        normals,
        descriptors,
        base_confidence,
        view_basis,
    })
}
