use serde::{Deserialize, Serialize};

use super::EncodingError;

/// Axis-aligned pixel window holding explicit texels; everything outside
/// reads as the fill value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

/// Per-pixel 3D signal: NOCS coordinates (3 channels), inverse depth or
/// metric depth (1 channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap3D {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub window: Window,
    /// `window.height × window.width × channels`, row-major.
    pub data: Vec<f32>,
    /// One byte per window texel, 1 where the texel holds a valid value.
    pub valid: Vec<u8>,
    pub fill: Vec<f32>,
}

impl DenseMap3D {
    pub fn filled(width: u32, height: u32, fill: Vec<f32>) -> Self {
        let window = Window { x0: 0, y0: 0, width, height };
        Self::with_window(width, height, window, fill)
    }

    pub fn with_window(width: u32, height: u32, window: Window, fill: Vec<f32>) -> Self {
        let n = (window.width * window.height) as usize;
        let channels = fill.len();
        let mut data = Vec::with_capacity(n * channels);
        for _ in 0..n {
            data.extend_from_slice(&fill);
        }
        Self { width, height, channels, window, data, valid: vec![0; n], fill }
    }

    fn offset(&self, x: u32, y: u32) -> Option<usize> {
        let w = &self.window;
        if x < w.x0 || y < w.y0 || x >= w.x0 + w.width || y >= w.y0 + w.height {
            return None;
        }
        Some(((y - w.y0) * w.width + (x - w.x0)) as usize)
    }

    pub fn texel(&self, x: u32, y: u32) -> &[f32] {
        match self.offset(x, y) {
            Some(o) => &self.data[o * self.channels..(o + 1) * self.channels],
            None => &self.fill,
        }
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.offset(x, y).is_some_and(|o| self.valid[o] != 0)
    }

    /// Writes a valid texel. Panics outside the window.
    pub fn set(&mut self, x: u32, y: u32, values: &[f32]) {
        let o = self.offset(x, y).expect("texel outside the map window");
        self.data[o * self.channels..(o + 1) * self.channels].copy_from_slice(values);
        self.valid[o] = 1;
    }

    pub fn invalidate(&mut self, x: u32, y: u32) {
        if let Some(o) = self.offset(x, y) {
            let c = self.channels;
            self.data[o * c..(o + 1) * c].copy_from_slice(&self.fill.clone());
            self.valid[o] = 0;
        }
    }

    /// Iterates `(x, y, values)` over valid texels.
    pub fn valid_texels(&self) -> impl Iterator<Item = (u32, u32, &[f32])> + '_ {
        let w = self.window;
        self.valid.iter().enumerate().filter(|(_, &v)| v != 0).map(move |(o, _)| {
            let x = w.x0 + (o as u32 % w.width);
            let y = w.y0 + (o as u32 / w.width);
            (x, y, &self.data[o * self.channels..(o + 1) * self.channels])
        })
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v != 0).count()
    }

    pub fn map_valid(&mut self, mut f: impl FnMut(&mut [f32])) {
        let c = self.channels;
        for (o, v) in self.valid.iter().enumerate() {
            if *v != 0 {
                f(&mut self.data[o * c..(o + 1) * c]);
            }
        }
    }

    /// Shrinks the window to the bounding box of the valid texels.
    pub fn crop_to_valid(&mut self) {
        let (mut x_min, mut y_min, mut x_max, mut y_max) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for (x, y, _) in self.valid_texels() {
            any = true;
            x_min = x_min.min(x);
            y_min = y_min.min(y);
            x_max = x_max.max(x);
            y_max = y_max.max(y);
        }
        let window = if any {
            Window { x0: x_min, y0: y_min, width: x_max - x_min + 1, height: y_max - y_min + 1 }
        } else {
            Window { x0: 0, y0: 0, width: 0, height: 0 }
        };
        let mut out = Self::with_window(self.width, self.height, window, self.fill.clone());
        for y in window.y0..window.y0 + window.height {
            for x in window.x0..window.x0 + window.width {
                if self.is_valid(x, y) {
                    out.set(x, y, self.texel(x, y));
                }
            }
        }
        *self = out;
    }
}

/// Bilinear lookup at sub-pixel `(x, y)`; texel centers sit at integer
/// coordinates.
pub fn sample_map_bilinear(map: &DenseMap3D, x: f64, y: f64) -> Result<Vec<f64>, EncodingError> {
    let mut out = vec![0.0; map.channels];
    sample_map_bilinear_into(map, x, y, &mut out)?;
    Ok(out)
}

pub fn sample_map_bilinear_into(map: &DenseMap3D, x: f64, y: f64, out: &mut [f64]) -> Result<(), EncodingError> {
    let (w, h) = (map.width as f64, map.height as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return Err(EncodingError::OutOfBounds { x, y, width: map.width, height: map.height });
    }
    let x0 = (x.floor() as u32).min(map.width.saturating_sub(2));
    let y0 = (y.floor() as u32).min(map.height.saturating_sub(2));
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let texels = [map.texel(x0, y0), map.texel(x1, y0), map.texel(x0, y1), map.texel(x1, y1)];
    for (c, o) in out.iter_mut().enumerate() {
        *o = weights.iter().zip(&texels).map(|(w, t)| w * t[c] as f64).sum();
    }
    Ok(())
}
