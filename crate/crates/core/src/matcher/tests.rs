use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoding::{EncoderInput, SignalEncoding};
use crate::nn::Parameters;
use crate::scenegen::MatchLabels;

fn small_config() -> MatcherConfig {
    MatcherConfig { descriptor_dim: 16, num_layers: 2, num_heads: 2, sinkhorn_iterations: 50 }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize, signal: usize) -> EncoderInput {
    let positions = Array2::from_shape_fn((n, 3), |(_, c)| if c == 2 { rng.gen_range(0.2..1.0) } else { rng.gen_range(-1.0..1.0) });
    let mut descriptors = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f64..1.0));
    for mut row in descriptors.axis_iter_mut(Axis(0)) {
        let norm: f64 = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    let signal = (signal > 0).then(|| Array2::from_shape_fn((n, signal), |_| rng.gen_range(0.0..1.0)));
    EncoderInput { positions, descriptors, signal }
}

/// B is a noisy permutation of A so the labels are learnable.
fn correlated_pair(rng: &mut ChaCha8Rng, n: usize, d: usize, signal: usize) -> TrainSample {
    let a = random_input(rng, n, d, signal);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let kept = n - 2;
    let mut b = a.select(&perm[..kept]);
    b.descriptors.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    let mut extra = random_input(rng, 2, d, signal);
    extra.positions.mapv_inplace(|v| v * 0.5);
    let b = EncoderInput {
        positions: ndarray::concatenate![Axis(0), b.positions, extra.positions],
        descriptors: ndarray::concatenate![Axis(0), b.descriptors, extra.descriptors],
        signal: b.signal.zip(extra.signal).map(|(s, e)| ndarray::concatenate![Axis(0), s, e]),
    };
    let labels = MatchLabels {
        matches: perm[..kept].iter().enumerate().map(|(j, &i)| (i, j)).collect(),
        unmatched_a: perm[kept..].to_vec(),
        unmatched_b: vec![kept, kept + 1],
    };
    TrainSample { a, b, labels }
}

fn loss_of(w: &MatcherWeights, s: &TrainSample) -> f64 {
    batch_loss(w, &[s]).unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut w = MatcherWeights::init(small_config(), 1).unwrap();
    w.add_signal_branch(3, SignalEncoding::Positional { frequencies: 4 }, 2);
    // Perturb the zero-initialized layer so its gradient path is exercised.
    w.encoder.mlp3d.as_mut().unwrap().mlp.last_mut().weight.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    let sample = correlated_pair(&mut rng, 6, 16, 3);
    let (_, grad, _) = gradients(&w, &[&sample]).unwrap();
    let analytic = grad.flatten();
    let base = w.flatten();
    let h = 1e-4;
    let mut checked = 0;
    for _ in 0..50 {
        let k = rng.gen_range(0..base.len());
        let mut p = base.clone();
        p[k] += h;
        let mut wp = w.clone();
        wp.assign_flat(&p);
        p[k] -= 2.0 * h;
        let mut wm = w.clone();
        wm.assign_flat(&p);
        let numeric = (loss_of(&wp, &sample) - loss_of(&wm, &sample)) / (2.0 * h);
        let scale = numeric.abs().max(analytic[k].abs());
        if scale < 1e-7 {
            continue;
        }
        assert!(
            (numeric - analytic[k]).abs() / scale < 1e-3,
            "param {k}: numeric {numeric} analytic {}",
            analytic[k]
        );
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn swapping_inputs_transposes_the_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MatcherConfig { sinkhorn_iterations: 500, ..small_config() };
    let w = MatcherWeights::init(cfg, 9).unwrap();
    let a = random_input(&mut rng, 7, 16, 0);
    let b = random_input(&mut rng, 5, 16, 0);
    let ab = w.match_pair(&a, &b).unwrap().probabilities();
    let ba = w.match_pair(&b, &a).unwrap().probabilities();
    let diff = (&ab - &ba.t()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-6, "max difference {diff}");
}

#[test]
fn permuting_keypoints_permutes_the_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = MatcherWeights::init(small_config(), 4).unwrap();
    let a = random_input(&mut rng, 6, 16, 0);
    let b = random_input(&mut rng, 4, 16, 0);
    let perm = [3, 0, 5, 1, 4, 2];
    let base = w.match_pair(&a, &b).unwrap().log_p;
    let permuted = w.match_pair(&a.select(&perm), &b).unwrap().log_p;
    for (r, &src) in perm.iter().enumerate() {
        for c in 0..=4 {
            assert!((permuted[[r, c]] - base[[src, c]]).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_layers_leave_embeddings_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = MatcherConfig { num_layers: 0, ..small_config() };
    let w = MatcherWeights::init(cfg, 2).unwrap();
    let a = Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0));
    let b = Array2::from_shape_fn((4, 16), |_| rng.gen_range(-1.0..1.0));
    let (ra, rb) = w.gnn_forward(&a, &b).unwrap();
    assert_eq!(ra, a);
    assert_eq!(rb, b);
}

#[test]
fn odd_layer_count_and_bad_heads_rejected() {
    let cfg = MatcherConfig { num_layers: 3, ..small_config() };
    assert!(matches!(MatcherWeights::init(cfg, 0), Err(MatcherError::InvalidConfig(_))));
    let cfg = MatcherConfig { num_heads: 3, ..small_config() };
    assert!(matches!(MatcherWeights::init(cfg, 0), Err(MatcherError::InvalidConfig(_))));
}

#[test]
fn fresh_signal_branch_does_not_change_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w2d = MatcherWeights::init(small_config(), 7).unwrap();
    let mut w3d = w2d.clone();
    w3d.add_signal_branch(3, SignalEncoding::Positional { frequencies: 10 }, 1);
    let a = random_input(&mut rng, 5, 16, 3);
    let b = random_input(&mut rng, 6, 16, 3);
    let strip = |x: &EncoderInput| EncoderInput { signal: None, ..x.clone() };
    let p2 = w2d.match_pair(&strip(&a), &strip(&b)).unwrap();
    let p3 = w3d.match_pair(&a, &b).unwrap();
    assert_eq!(p2, p3);
}

#[test]
fn mismatched_descriptor_width_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = MatcherWeights::init(small_config(), 0).unwrap();
    let a = random_input(&mut rng, 3, 8, 0);
    let b = random_input(&mut rng, 3, 16, 0);
    assert!(w.match_pair(&a, &b).is_err());
}

#[test]
fn training_overfits_a_small_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<TrainSample> = (0..10).map(|_| correlated_pair(&mut rng, 8, 16, 0)).collect();
    let cfg = TrainConfig {
        matcher: MatcherConfig { sinkhorn_iterations: 20, ..small_config() },
        learning_rate: 3e-3,
        batch_size: 10,
        iterations: 300,
        decay_start: 10_000,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, None).unwrap();
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < 0.05 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<TrainSample> = (0..3).map(|_| correlated_pair(&mut rng, 5, 16, 0)).collect();
    let cfg = TrainConfig {
        matcher: small_config(),
        learning_rate: 0.0,
        batch_size: 2,
        iterations: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, None).unwrap();
    assert_eq!(out.weights, MatcherWeights::init(small_config(), 4).unwrap());
}

#[test]
fn training_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<TrainSample> = (0..4).map(|_| correlated_pair(&mut rng, 5, 16, 0)).collect();
    let cfg = TrainConfig { matcher: small_config(), learning_rate: 1e-3, batch_size: 2, iterations: 5, ..TrainConfig::default() };
    let a = train(&data, &cfg, None).unwrap();
    let b = train(&data, &cfg, None).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
}

#[test]
fn finetune_adds_a_branch_and_keeps_initial_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<TrainSample> = (0..3).map(|_| correlated_pair(&mut rng, 5, 16, 3)).collect();
    let init = MatcherWeights::init(small_config(), 1).unwrap();
    let cfg = TrainConfig {
        stage: Stage::Finetune3d,
        signal: SignalMode::Nocs,
        matcher: small_config(),
        batch_size: 3,
        iterations: 1,
        ..TrainConfig::default()
    };
    let stripped: Vec<TrainSample> = data
        .iter()
        .map(|s| TrainSample {
            a: EncoderInput { signal: None, ..s.a.clone() },
            b: EncoderInput { signal: None, ..s.b.clone() },
            labels: s.labels.clone(),
        })
        .collect();
    let refs: Vec<&TrainSample> = stripped.iter().collect();
    let before = batch_loss(&init, &refs).unwrap();
    let out = train(&data, &cfg, Some(init)).unwrap();
    assert!(out.weights.encoder.mlp3d.is_some());
    assert!((out.log[0].loss - before).abs() < 1e-12);
}
