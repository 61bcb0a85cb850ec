use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::render::View;
use crate::encoding::DenseMap3D;

/// Simulated estimation error of the dense 3D signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalNoiseConfig {
    /// Per-pixel, per-channel white noise on NOCS.
    pub nocs_white_sigma: f64,
    /// Standard deviation of the spatially correlated NOCS field per channel.
    pub nocs_field_sigma: f64,
    pub field_components: usize,
    /// Wavelength range of the field's sinusoids, in pixels.
    pub field_wavelength_px: (f64, f64),
    pub mde_gain: (f64, f64),
    pub mde_bias: (f64, f64),
    pub mde_sigma: f64,
}

impl Default for SignalNoiseConfig {
    /// RMS Euclidean NOCS error of about 0.047 before clipping.
    fn default() -> Self {
        Self {
            nocs_white_sigma: 0.015,
            nocs_field_sigma: 0.0226,
            field_components: 8,
            field_wavelength_px: (20.0, 80.0),
            mde_gain: (0.7, 1.4),
            mde_bias: (-0.1, 0.1),
            mde_sigma: 0.01,
        }
    }
}

impl SignalNoiseConfig {
    pub fn zero() -> Self {
        Self { nocs_white_sigma: 0.0, nocs_field_sigma: 0.0, mde_gain: (1.0, 1.0), mde_bias: (0.0, 0.0), mde_sigma: 0.0, ..Self::default() }
    }
}

/// Sum of random plane waves with a given standard deviation.
struct Field {
    waves: Vec<(f64, f64, f64)>,
    amplitude: f64,
}

impl Field {
    fn new<R: Rng>(rng: &mut R, cfg: &SignalNoiseConfig) -> Self {
        let k = cfg.field_components.max(1);
        let waves = (0..k)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let (lo, hi) = cfg.field_wavelength_px;
                let lambda = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let freq = std::f64::consts::TAU / lambda;
                (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves, amplitude: cfg.nocs_field_sigma * (2.0 / k as f64).sqrt() }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amplitude * self.waves.iter().map(|(kx, ky, phase)| (kx * x + ky * y + phase).sin()).sum::<f64>()
    }
}

fn corrupt_nocs<R: Rng>(map: &mut DenseMap3D, cfg: &SignalNoiseConfig, rng: &mut R) {
    if cfg.nocs_white_sigma == 0.0 && cfg.nocs_field_sigma == 0.0 {
        return;
    }
    let fields: Vec<Field> = (0..map.channels).map(|_| Field::new(rng, cfg)).collect();
    let w = map.window;
    let c = map.channels;
    for o in 0..map.valid.len() {
        if map.valid[o] == 0 {
            continue;
        }
        let (x, y) = ((w.x0 + o as u32 % w.width) as f64, (w.y0 + o as u32 / w.width) as f64);
        for (ch, field) in fields.iter().enumerate() {
            let white: f64 = rng.sample(StandardNormal);
            let v = map.data[o * c + ch] as f64 + field.at(x, y) + cfg.nocs_white_sigma * white;
            map.data[o * c + ch] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

fn corrupt_inverse_depth<R: Rng>(map: &mut DenseMap3D, cfg: &SignalNoiseConfig, rng: &mut R) {
    let pick = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let gain = pick(rng, cfg.mde_gain);
    let bias = pick(rng, cfg.mde_bias);
    let sigma = cfg.mde_sigma;
    map.map_valid(|v| {
        let noise: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        v[0] = (gain * v[0] as f64 + bias + noise) as f32;
    });
}

/// Replaces the NOCS map with a noisy estimate (white plus spatially
/// correlated error, clipped to the unit cube) and the inverse-depth map
/// with an unknown per-view affine transform of it plus noise.
pub fn corrupt_3d_signal(view: &View, cfg: &SignalNoiseConfig, seed: u64) -> View {
    let mut out = view.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_nocs(&mut out.nocs, cfg, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d44_4500);
    corrupt_inverse_depth(&mut out.inverse_depth, cfg, &mut rng);
    out.estimated = true;
    out
}

/// Min-max normalizes the valid texels of a one-channel map to `[0, 1]`,
/// removing any positive affine transform.
pub fn normalize_relative(map: &DenseMap3D) -> DenseMap3D {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (_, _, v) in map.valid_texels() {
        lo = lo.min(v[0]);
        hi = hi.max(v[0]);
    }
    let mut out = map.clone();
    let span = hi - lo;
    out.map_valid(|v| v[0] = if span > 0.0 { (v[0] - lo) / span } else { 0.5 });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, Intrinsics};
    use crate::scenegen::{generate_object, render_view, ClassConfig, NoiseConfig};
    use nalgebra::Vector3;

    fn view(seed: u64) -> View {
        let obj = generate_object(&ClassConfig { num_points: 300, ..ClassConfig::default() }, seed).unwrap();
        let k = Intrinsics::new(240.0, 240.0, 128.0, 128.0, 256, 256).unwrap();
        let cam = Camera::look_at(k, &Vector3::new(0.5, 0.3, 0.3), &Vector3::zeros(), &Vector3::z()).unwrap();
        render_view(&obj, &cam, &NoiseConfig::default(), seed).unwrap()
    }

    #[test]
    fn zero_noise_leaves_maps_unchanged() {
        let v = view(1);
        let out = corrupt_3d_signal(&v, &SignalNoiseConfig::zero(), 3);
        assert_eq!(out.nocs, v.nocs);
        assert_eq!(out.inverse_depth, v.inverse_depth);
        assert!(out.estimated);
    }

    #[test]
    fn default_nocs_error_has_the_target_rms() {
        let mut sq = 0.0;
        let mut n = 0usize;
        let mut seed = 0;
        while n < 1_000_000 {
            let v = view(seed % 7);
            let out = corrupt_3d_signal(&v, &SignalNoiseConfig::default(), seed);
            for ((_, _, a), (_, _, b)) in v.nocs.valid_texels().zip(out.nocs.valid_texels()) {
                sq += a.iter().zip(b).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>();
                n += 1;
            }
            seed += 1;
        }
        let rms = (sq / n as f64).sqrt();
        assert!((0.042..=0.052).contains(&rms), "rms {rms}");
    }

    #[test]
    fn affine_depth_preserves_rank_order_and_normalizes_away() {
        let v = view(2);
        let cfg = SignalNoiseConfig { mde_sigma: 0.0, ..SignalNoiseConfig::default() };
        let out = corrupt_3d_signal(&v, &cfg, 5);
        let before: Vec<f32> = v.inverse_depth.valid_texels().map(|(_, _, x)| x[0]).collect();
        let after: Vec<f32> = out.inverse_depth.valid_texels().map(|(_, _, x)| x[0]).collect();
        for i in 0..before.len() - 1 {
            if before[i] < before[i + 1] {
                assert!(after[i] <= after[i + 1]);
            }
        }
        let (na, nb) = (normalize_relative(&v.inverse_depth), normalize_relative(&out.inverse_depth));
        for ((_, _, a), (_, _, b)) in na.valid_texels().zip(nb.valid_texels()) {
            assert!((a[0] - b[0]).abs() < 1e-4);
        }
    }

    #[test]
    fn corrupted_nocs_stays_in_unit_cube_and_off_mask_fill_is_kept() {
        let v = view(3);
        let out = corrupt_3d_signal(&v, &SignalNoiseConfig { nocs_white_sigma: 0.3, ..SignalNoiseConfig::default() }, 1);
        assert!(out.nocs.valid_texels().all(|(_, _, x)| x.iter().all(|c| (0.0..=1.0).contains(c))));
        assert_eq!(out.nocs.texel(0, 0), &[0.5f32, 0.5, 0.5]);
    }
}
