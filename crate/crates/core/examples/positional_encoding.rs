// Fourier features of a NOCS value and the zero-initialized 3D branch,
// which leaves pretrained 2D embeddings untouched.

use lfm3d::encoding::{
    encode_keypoints, positional_encode, EncoderMode, EncoderWeights, LocalFeature, SignalEncoding, DEFAULT_FREQUENCIES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<f64, Box<dyn std::error::Error>> {
    let pe = positional_encode(&[0.25, 0.5, 0.75], 2);
    println!("PE of (0.25, 0.5, 0.75) with 2 frequencies: {pe:.3?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let features: Vec<LocalFeature> = (0..5)
        .map(|i| LocalFeature {
            x: 20.0 * i as f64,
            y: 40.0,
            confidence: 0.9,
            descriptor: (0..8).map(|d| ((i + d) as f64).sin()).collect(),
            signal: vec![0.1 * i as f64, 0.5, 0.3],
        })
        .collect();
    let two_d = EncoderWeights::init(&mut rng, 8);
    let mut with_3d = two_d.clone();
    with_3d.add_signal_branch(&mut rng, 3, SignalEncoding::Positional { frequencies: DEFAULT_FREQUENCIES });

    let before = encode_keypoints(&features, &two_d, EncoderMode::TwoDOnly, 256, 256)?;
    let after = encode_keypoints(&features, &with_3d, with_3d.mode(), 256, 256)?;
    let diff = (&after - &before).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("largest change after adding the 3D branch: {diff}");
    Ok(diff)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
