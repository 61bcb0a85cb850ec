use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{GnnLayer, GnnLayerCache};
use super::loss::log_assignment_loss;
use super::sinkhorn::{sinkhorn_backward, sinkhorn_traced, Assignment, SinkhornTrace};
use super::MatcherError;
use crate::encoding::{EncoderCache, EncoderInput, EncoderWeights, SignalEncoding};
use crate::nn::{join, Linear, Parameters};
use crate::scenegen::MatchLabels;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub descriptor_dim: usize,
    /// Alternating self/cross layers; must be even.
    pub num_layers: usize,
    pub num_heads: usize,
    pub sinkhorn_iterations: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { descriptor_dim: 64, num_layers: 4, num_heads: 4, sinkhorn_iterations: 100 }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.num_layers % 2 != 0 {
            return Err(MatcherError::InvalidConfig(format!(
                "layer count {} must be even to alternate self and cross attention",
                self.num_layers
            )));
        }
        if self.num_heads == 0 || self.descriptor_dim % self.num_heads != 0 {
            return Err(MatcherError::InvalidConfig(format!(
                "descriptor dimension {} is not divisible by {} heads",
                self.descriptor_dim, self.num_heads
            )));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(MatcherError::InvalidConfig("sinkhorn needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Whether layer `index` (0-based) attends within its own set.
pub fn is_self_layer(index: usize) -> bool {
    index % 2 == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherWeights {
    pub config: MatcherConfig,
    pub encoder: EncoderWeights,
    pub layers: Vec<GnnLayer>,
    pub final_proj: Linear,
    pub dustbin: f64,
}

impl Parameters for MatcherWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("gnn.{i}")), f);
        }
        self.final_proj.visit(&join(prefix, "final_proj"), f);
        f(&join(prefix, "dustbin"), &[1], std::slice::from_ref(&self.dustbin));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("gnn.{i}")), f);
        }
        self.final_proj.visit_mut(&join(prefix, "final_proj"), f);
        f(&join(prefix, "dustbin"), &[1], std::slice::from_mut(&mut self.dustbin));
    }
}

/// Everything the reverse pass needs from one pair's forward pass.
#[derive(Debug, Clone)]
pub struct PairCache {
    enc_a: EncoderCache,
    enc_b: EncoderCache,
    layers: Vec<(GnnLayerCache, GnnLayerCache)>,
    refined_a: Array2<f64>,
    refined_b: Array2<f64>,
    proj_a: Array2<f64>,
    proj_b: Array2<f64>,
    sinkhorn: SinkhornTrace,
}

impl MatcherWeights {
    /// Fresh 2D-only weights; dustbin score starts at 1.
    pub fn init(config: MatcherConfig, seed: u64) -> Result<Self, MatcherError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.descriptor_dim;
        let encoder = EncoderWeights::init(&mut rng, d);
        let layers = (0..config.num_layers).map(|_| GnnLayer::init(&mut rng, d, config.num_heads)).collect();
        let final_proj = Linear::init(&mut rng, d, d);
        Ok(Self { config, encoder, layers, final_proj, dustbin: 1.0 })
    }

    /// Adds a zero-output 3D-signal branch to the encoder.
    pub fn add_signal_branch(&mut self, signal_dim: usize, encoding: SignalEncoding, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.encoder.add_signal_branch(&mut rng, signal_dim, encoding);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.zeros_like(),
            layers: self.layers.iter().map(GnnLayer::zeros_like).collect(),
            final_proj: Linear::zeros(self.final_proj.inputs(), self.final_proj.outputs()),
            dustbin: 0.0,
        }
    }

    fn check_embeddings(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<(), MatcherError> {
        let d = self.config.descriptor_dim;
        if a.ncols() != d || b.ncols() != d {
            return Err(MatcherError::ShapeMismatch(format!(
                "embedding widths {}/{} do not match D = {d}",
                a.ncols(),
                b.ncols()
            )));
        }
        if a.nrows() == 0 || b.nrows() == 0 {
            return Err(MatcherError::ShapeMismatch("both keypoint sets must be non-empty".into()));
        }
        Ok(())
    }

    /// Applies the alternating self/cross message-passing layers.
    pub fn gnn_forward(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), MatcherError> {
        self.check_embeddings(a, b)?;
        let (a, b, _) = self.gnn_forward_cached(a.clone(), b.clone());
        Ok((a, b))
    }

    #[allow(clippy::type_complexity)]
    fn gnn_forward_cached(
        &self,
        mut a: Array2<f64>,
        mut b: Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Vec<(GnnLayerCache, GnnLayerCache)>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (src_a, src_b) = if is_self_layer(l) { (&a, &b) } else { (&b, &a) };
            let (na, ca) = layer.forward_cached(&a, src_a);
            let (nb, cb) = layer.forward_cached(&b, src_b);
            a = na;
            b = nb;
            caches.push((ca, cb));
        }
        (a, b, caches)
    }

    /// `S_ij = <proj(a_i), proj(b_j)> / sqrt(D)`.
    pub fn score_matrix(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, MatcherError> {
        self.check_embeddings(a, b)?;
        let pa = self.final_proj.forward(a);
        let pb = self.final_proj.forward(b);
        Ok(self.scores_from_projections(&pa, &pb))
    }

    fn scores_from_projections(&self, pa: &Array2<f64>, pb: &Array2<f64>) -> Array2<f64> {
        let scale = 1.0 / (self.config.descriptor_dim as f64).sqrt();
        let mut s = pa.dot(&pb.t());
        s.mapv_inplace(|v| v * scale);
        s
    }

    /// Full inference: encoder, message passing, scores, optimal transport.
    pub fn match_pair(&self, a: &EncoderInput, b: &EncoderInput) -> Result<Assignment, MatcherError> {
        Ok(self.forward_cached(a, b)?.0)
    }

    pub fn forward_cached(&self, a: &EncoderInput, b: &EncoderInput) -> Result<(Assignment, PairCache), MatcherError> {
        let (xa, enc_a) = self.encoder.forward_cached(a)?;
        let (xb, enc_b) = self.encoder.forward_cached(b)?;
        self.check_embeddings(&xa, &xb)?;
        let (refined_a, refined_b, layers) = self.gnn_forward_cached(xa, xb);
        let proj_a = self.final_proj.forward(&refined_a);
        let proj_b = self.final_proj.forward(&refined_b);
        let scores = self.scores_from_projections(&proj_a, &proj_b);
        let (assignment, sinkhorn) = sinkhorn_traced(&scores, self.dustbin, self.config.sinkhorn_iterations)?;
        let cache = PairCache { enc_a, enc_b, layers, refined_a, refined_b, proj_a, proj_b, sinkhorn };
        Ok((assignment, cache))
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// `dL/dlog_p`.
    pub fn backward(&self, cache: &PairCache, dlog_p: &Array2<f64>) -> MatcherWeights {
        let mut grad = self.zeros_like();
        self.backward_into(cache, dlog_p, &mut grad);
        grad
    }

    pub fn backward_into(&self, cache: &PairCache, dlog_p: &Array2<f64>, grad: &mut MatcherWeights) {
        let (dscores, ddustbin) = sinkhorn_backward(&cache.sinkhorn, dlog_p);
        grad.dustbin += ddustbin;
        let scale = 1.0 / (self.config.descriptor_dim as f64).sqrt();
        let dproj_a = dscores.dot(&cache.proj_b) * scale;
        let dproj_b = dscores.t().dot(&cache.proj_a) * scale;
        let mut da = self.final_proj.backward(&cache.refined_a, &dproj_a, &mut grad.final_proj);
        let mut db = self.final_proj.backward(&cache.refined_b, &dproj_b, &mut grad.final_proj);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (ca, cb) = &cache.layers[l];
            let (dxa, dsrc_a) = layer.backward(ca, &da, &mut grad.layers[l]);
            let (dxb, dsrc_b) = layer.backward(cb, &db, &mut grad.layers[l]);
            if is_self_layer(l) {
                da = dxa + &dsrc_a;
                db = dxb + &dsrc_b;
            } else {
                da = dxa + &dsrc_b;
                db = dxb + &dsrc_a;
            }
        }
        self.encoder.backward(&cache.enc_a, &da, &mut grad.encoder);
        self.encoder.backward(&cache.enc_b, &db, &mut grad.encoder);
    }
}

/// One supervised pair in dense form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub a: EncoderInput,
    pub b: EncoderInput,
    pub labels: MatchLabels,
}

/// Batch-mean loss and gradient. Pairs without supervision are skipped; the
/// returned count says how many contributed.
pub fn gradients(
    weights: &MatcherWeights,
    batch: &[&TrainSample],
) -> Result<(f64, MatcherWeights, usize), MatcherError> {
    let mut grad = weights.zeros_like();
    let mut total = 0.0;
    let mut used = 0;
    for sample in batch {
        if sample.labels.num_supervised() == 0 {
            continue;
        }
        let (assignment, cache) = weights.forward_cached(&sample.a, &sample.b)?;
        let (loss, dlog_p) = log_assignment_loss(&assignment.log_p, &sample.labels)?;
        weights.backward_into(&cache, &dlog_p, &mut grad);
        total += loss;
        used += 1;
    }
    if used == 0 {
        return Err(MatcherError::EmptySupervision);
    }
    let inv = 1.0 / used as f64;
    grad.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= inv));
    let mut bad = None;
    grad.visit("", &mut |name, _, v| {
        if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(MatcherError::NonFiniteGradient(name));
    }
    Ok((total * inv, grad, used))
}

/// Batch-mean loss without gradients.
pub fn batch_loss(weights: &MatcherWeights, batch: &[&TrainSample]) -> Result<f64, MatcherError> {
    let mut total = 0.0;
    let mut used = 0;
    for sample in batch {
        if sample.labels.num_supervised() == 0 {
            continue;
        }
        let a = weights.match_pair(&sample.a, &sample.b)?;
        total += log_assignment_loss(&a.log_p, &sample.labels)?.0;
        used += 1;
    }
    if used == 0 {
        return Err(MatcherError::EmptySupervision);
    }
    Ok(total / used as f64)
}
