use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{gradients, MatcherConfig, MatcherWeights, TrainSample};
use super::MatcherError;
use crate::encoding::{SignalEncoding, DEFAULT_FREQUENCIES};
use crate::nn::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain2d,
    Finetune3d,
}

/// Which 3D signal feeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalMode {
    Nocs,
    Mde,
    None,
}

impl SignalMode {
    pub fn channels(&self) -> usize {
        match self {
            SignalMode::Nocs => 3,
            SignalMode::Mde => 1,
            SignalMode::None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub signal: SignalMode,
    pub positional_encoding: bool,
    pub frequencies: usize,
    pub learning_rate: f64,
    /// Iteration after which the rate decays geometrically.
    pub decay_start: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub matcher: MatcherConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain2d,
            signal: SignalMode::None,
            positional_encoding: true,
            frequencies: DEFAULT_FREQUENCIES,
            learning_rate: 8e-5,
            decay_start: 5_000,
            decay_factor: 0.999995,
            batch_size: 8,
            iterations: 50_000,
            seed: 0,
            matcher: MatcherConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(MatcherError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(MatcherError::InvalidConfig(format!("decay factor {} not in (0, 1)", self.decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(MatcherError::InvalidConfig("batch size must be positive".into()));
        }
        if self.positional_encoding && self.frequencies == 0 {
            return Err(MatcherError::InvalidConfig("positional encoding needs at least one frequency".into()));
        }
        self.matcher.validate()
    }

    pub fn signal_encoding(&self) -> SignalEncoding {
        if self.positional_encoding {
            SignalEncoding::Positional { frequencies: self.frequencies }
        } else {
            SignalEncoding::Raw
        }
    }
}

/// Constant rate until `decay_start`, then multiplied by `decay_factor` each
/// iteration.
pub fn learning_rate_at(config: &TrainConfig, iteration: usize) -> f64 {
    if iteration < config.decay_start {
        config.learning_rate
    } else {
        config.learning_rate * config.decay_factor.powi((iteration - config.decay_start) as i32)
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: MatcherWeights,
    pub log: Vec<TrainLogEntry>,
}

/// Prepares the starting weights for a stage.
fn initial_weights(config: &TrainConfig, init: Option<MatcherWeights>) -> Result<MatcherWeights, MatcherError> {
    match config.stage {
        Stage::Pretrain2d => MatcherWeights::init(config.matcher, config.seed),
        Stage::Finetune3d => {
            let mut w = init.ok_or(MatcherError::MissingCheckpoint)?;
            if config.signal != SignalMode::None && w.encoder.mlp3d.is_none() {
                w.add_signal_branch(config.signal.channels(), config.signal_encoding(), config.seed ^ 0x3d3d);
            }
            Ok(w)
        }
    }
}

pub fn train(
    dataset: &[TrainSample],
    config: &TrainConfig,
    init: Option<MatcherWeights>,
) -> Result<TrainOutcome, MatcherError> {
    train_with_progress(dataset, config, init, |_| {})
}

/// Mini-batch training. Batches are drawn from a seeded reshuffle of the
/// dataset each epoch; pairs without supervision are skipped inside a batch.
pub fn train_with_progress(
    dataset: &[TrainSample],
    config: &TrainConfig,
    init: Option<MatcherWeights>,
    mut on_iteration: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome, MatcherError> {
    config.validate()?;
    let mut weights = initial_weights(config, init)?;
    if config.iterations == 0 {
        return Ok(TrainOutcome { weights, log: Vec::new() });
    }
    let usable: Vec<&TrainSample> = dataset.iter().filter(|s| s.labels.num_supervised() > 0).collect();
    if usable.is_empty() {
        return Err(MatcherError::EmptySupervision);
    }
    let strip_signal = weights.encoder.mlp3d.is_none();
    let stripped: Vec<TrainSample>;
    let usable: Vec<&TrainSample> = if strip_signal {
        stripped = usable
            .iter()
            .map(|s| {
                let mut s = (*s).clone();
                s.a.signal = None;
                s.b.signal = None;
                s
            })
            .collect();
        stripped.iter().collect()
    } else {
        usable
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a11));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut params = weights.flatten();
    let mut adam = Adam::new(params.len(), config.beta1, config.beta2, config.epsilon);
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(usable[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad, _) = gradients(&weights, &batch)
            .map_err(|e| MatcherError::TrainingAborted { iteration, source: Box::new(e) })?;
        if !loss.is_finite() {
            return Err(MatcherError::TrainingAborted {
                iteration,
                source: Box::new(MatcherError::NonFiniteLoss(loss)),
            });
        }
        let lr = learning_rate_at(config, iteration);
        adam.update(&mut params, &grad.flatten(), lr);
        weights.assign_flat(&params);
        let entry = TrainLogEntry { iteration, loss, learning_rate: lr };
        on_iteration(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { weights, log })
}
