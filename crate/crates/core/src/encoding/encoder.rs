use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{positional_encode_into, EncodingError};
use crate::nn::{join, Mlp, MlpCache, Parameters};

/// Hidden widths of the 2D position MLP (before the final `D`).
pub const MLP2D_HIDDEN: [usize; 4] = [32, 64, 128, 256];
/// Hidden widths of the 3D signal MLP (before the final `D`).
pub const MLP3D_HIDDEN: [usize; 4] = [64, 64, 128, 128];
pub const DEFAULT_FREQUENCIES: usize = 10;

/// A keypoint with its position, confidence, descriptor and sampled 3D signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub descriptor: Vec<f64>,
    /// NOCS coordinates (3 values) or normalized inverse depth (1 value);
    /// empty until looked up.
    pub signal: Vec<f64>,
}

/// How the 3D signal reaches its MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalEncoding {
    Raw,
    Positional { frequencies: usize },
}

impl SignalEncoding {
    pub fn input_width(&self, signal_dim: usize) -> usize {
        match self {
            SignalEncoding::Raw => signal_dim,
            SignalEncoding::Positional { frequencies } => 2 * frequencies * signal_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// `x = d + MLP2D(p)`
    TwoDOnly,
    /// `x = d + MLP2D(p) + MLP3D(n)`
    ThreeDRaw,
    /// `x = d + MLP2D(p) + MLP3D(PE(n))`
    ThreeDPe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalEncoder {
    pub signal_dim: usize,
    pub encoding: SignalEncoding,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub descriptor_dim: usize,
    pub mlp2d: Mlp,
    pub mlp3d: Option<SignalEncoder>,
}

impl EncoderWeights {
    pub fn init<R: Rng>(rng: &mut R, descriptor_dim: usize) -> Self {
        let mut widths = vec![3];
        widths.extend(MLP2D_HIDDEN);
        widths.push(descriptor_dim);
        let mut mlp2d = Mlp::init(rng, &widths);
        mlp2d.last_mut().bias.fill(0.0);
        Self { descriptor_dim, mlp2d, mlp3d: None }
    }

    /// Adds a 3D-signal branch whose output layer is zero, so the encoder
    /// output is unchanged until it is trained.
    pub fn add_signal_branch<R: Rng>(&mut self, rng: &mut R, signal_dim: usize, encoding: SignalEncoding) {
        let mut widths = vec![encoding.input_width(signal_dim)];
        widths.extend(MLP3D_HIDDEN);
        widths.push(self.descriptor_dim);
        let mut mlp = Mlp::init(rng, &widths);
        let last = mlp.last_mut();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self.mlp3d = Some(SignalEncoder { signal_dim, encoding, mlp });
    }

    pub fn mode(&self) -> EncoderMode {
        match &self.mlp3d {
            None => EncoderMode::TwoDOnly,
            Some(SignalEncoder { encoding: SignalEncoding::Raw, .. }) => EncoderMode::ThreeDRaw,
            Some(SignalEncoder { encoding: SignalEncoding::Positional { .. }, .. }) => EncoderMode::ThreeDPe,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            descriptor_dim: self.descriptor_dim,
            mlp2d: self.mlp2d.zeros_like(),
            mlp3d: self.mlp3d.as_ref().map(|s| SignalEncoder {
                signal_dim: s.signal_dim,
                encoding: s.encoding,
                mlp: s.mlp.zeros_like(),
            }),
        }
    }
}

impl Parameters for EncoderWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.mlp2d.visit(&join(prefix, "mlp2d"), f);
        if let Some(s) = &self.mlp3d {
            s.mlp.visit(&join(prefix, "mlp3d"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mlp2d.visit_mut(&join(prefix, "mlp2d"), f);
        if let Some(s) = &mut self.mlp3d {
            s.mlp.visit_mut(&join(prefix, "mlp3d"), f);
        }
    }
}

/// Dense encoder inputs for one keypoint set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    /// `M × 3`: x and y mapped to `[-1, 1]` by the image half-extent, then
    /// the raw confidence.
    pub positions: Array2<f64>,
    /// `M × D`
    pub descriptors: Array2<f64>,
    /// `M × V` raw 3D signal, when available.
    pub signal: Option<Array2<f64>>,
}

impl EncoderInput {
    pub fn from_features(features: &[LocalFeature], width: u32, height: u32) -> Result<Self, EncodingError> {
        let d = features.first().map_or(0, |f| f.descriptor.len());
        let v = features.first().map_or(0, |f| f.signal.len());
        let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
        let mut positions = Array2::zeros((features.len(), 3));
        let mut descriptors = Array2::zeros((features.len(), d));
        let mut signal = Array2::zeros((features.len(), v));
        for (i, f) in features.iter().enumerate() {
            if f.descriptor.len() != d || f.signal.len() != v {
                return Err(EncodingError::ShapeMismatch(format!(
                    "feature {i} has descriptor/signal widths {}/{}, expected {d}/{v}",
                    f.descriptor.len(),
                    f.signal.len()
                )));
            }
            positions[(i, 0)] = (f.x - hw) / hw;
            positions[(i, 1)] = (f.y - hh) / hh;
            positions[(i, 2)] = f.confidence;
            for (j, x) in f.descriptor.iter().enumerate() {
                descriptors[(i, j)] = *x;
            }
            for (j, x) in f.signal.iter().enumerate() {
                signal[(i, j)] = *x;
            }
        }
        Ok(Self { positions, descriptors, signal: (v > 0).then_some(signal) })
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            positions: self.positions.select(ndarray::Axis(0), rows),
            descriptors: self.descriptors.select(ndarray::Axis(0), rows),
            signal: self.signal.as_ref().map(|s| s.select(ndarray::Axis(0), rows)),
        }
    }
}

/// Input to the 3D branch after the (optional) positional encoding.
pub(crate) fn signal_branch_input(
    signal: &Array2<f64>,
    encoding: SignalEncoding,
) -> Array2<f64> {
    match encoding {
        SignalEncoding::Raw => signal.clone(),
        SignalEncoding::Positional { frequencies } => {
            let width = 2 * frequencies * signal.ncols();
            let mut flat = Vec::with_capacity(signal.nrows() * width);
            for row in signal.rows() {
                positional_encode_into(row.as_slice().expect("standard layout"), frequencies, &mut flat);
            }
            Array2::from_shape_vec((signal.nrows(), width), flat).expect("consistent width")
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    mlp2d: MlpCache,
    mlp3d: Option<MlpCache>,
}

impl EncoderWeights {
    fn check(&self, input: &EncoderInput) -> Result<(), EncodingError> {
        if input.descriptors.ncols() != self.descriptor_dim && !input.is_empty() {
            return Err(EncodingError::ShapeMismatch(format!(
                "descriptor width {} does not match encoder width {}",
                input.descriptors.ncols(),
                self.descriptor_dim
            )));
        }
        if let Some(s) = &self.mlp3d {
            match &input.signal {
                Some(sig) if sig.ncols() == s.signal_dim => {}
                Some(sig) => {
                    return Err(EncodingError::ShapeMismatch(format!(
                        "signal width {} does not match the 3D branch width {}",
                        sig.ncols(),
                        s.signal_dim
                    )))
                }
                None => return Err(EncodingError::ShapeMismatch("3D branch present but no signal".into())),
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, input: &EncoderInput) -> Result<(Array2<f64>, EncoderCache), EncodingError> {
        self.check(input)?;
        let (pos, c2) = self.mlp2d.forward_cached(&input.positions);
        let mut x = &input.descriptors + &pos;
        let mut c3 = None;
        if let Some(s) = &self.mlp3d {
            let sig = input.signal.as_ref().expect("checked");
            let (y, c) = s.mlp.forward_cached(&signal_branch_input(sig, s.encoding));
            x += &y;
            c3 = Some(c);
        }
        Ok((x, EncoderCache { mlp2d: c2, mlp3d: c3 }))
    }

    pub fn backward(&self, cache: &EncoderCache, dx: &Array2<f64>, grad: &mut EncoderWeights) {
        self.mlp2d.backward(&cache.mlp2d, dx, &mut grad.mlp2d);
        if let (Some(s), Some(c), Some(g)) = (&self.mlp3d, &cache.mlp3d, &mut grad.mlp3d) {
            s.mlp.backward(c, dx, &mut g.mlp);
        }
    }
}

/// Builds the keypoint embeddings for one image. `mode` must agree with the
/// branches present in `weights`.
pub fn encode_keypoints(
    features: &[LocalFeature],
    weights: &EncoderWeights,
    mode: EncoderMode,
    width: u32,
    height: u32,
) -> Result<Array2<f64>, EncodingError> {
    let mut input = EncoderInput::from_features(features, width, height)?;
    match mode {
        EncoderMode::TwoDOnly => {
            if weights.mlp3d.is_some() {
                let two_d = EncoderWeights { mlp3d: None, ..weights.clone() };
                input.signal = None;
                return Ok(two_d.forward_cached(&input)?.0);
            }
        }
        m if m != weights.mode() => {
            return Err(EncodingError::ShapeMismatch(format!(
                "mode {m:?} requested but the weights implement {:?}",
                weights.mode()
            )))
        }
        _ => {}
    }
    Ok(weights.forward_cached(&input)?.0)
}
