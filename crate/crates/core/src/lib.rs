//! Sparse feature matching infused with 3D signals (normalized object
//! coordinates or monocular inverse depth) on synthetic wide-baseline
//! object pairs.

pub mod encoding;
pub mod evaluation;
pub mod geometry;
pub mod nn;
pub mod baselines;
pub mod cli;
pub mod matcher;
pub mod scenegen;
