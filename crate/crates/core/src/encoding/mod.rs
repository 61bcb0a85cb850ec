//! 3D-signal lookup, positional encoding and the keypoint encoder that sums
//! descriptor, position and 3D-signal embeddings.

mod encoder;
mod map;
mod pe;

pub use encoder::{
    encode_keypoints, EncoderCache, EncoderInput, EncoderMode, EncoderWeights, LocalFeature, SignalEncoder,
    SignalEncoding, DEFAULT_FREQUENCIES, MLP2D_HIDDEN, MLP3D_HIDDEN,
};
pub use map::{sample_map_bilinear, sample_map_bilinear_into, DenseMap3D, Window};
pub use pe::{positional_encode, positional_encode_derivative, positional_encode_into};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("lookup at ({x}, {y}) outside the {width}x{height} map")]
    OutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
