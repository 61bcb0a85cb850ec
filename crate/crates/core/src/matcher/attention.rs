use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::nn::{join, Linear, Mlp, MlpCache, Parameters};

/// Multi-head scaled dot-product attention from a query set onto a source set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub merge: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    source: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    merged_in: Array2<f64>,
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dimension {dim} not divisible by {heads} heads");
        Self {
            heads,
            query: Linear::init(rng, dim, dim),
            key: Linear::init(rng, dim, dim),
            value: Linear::init(rng, dim, dim),
            merge: Linear::init(rng, dim, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.query.inputs();
        Self {
            heads: self.heads,
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            merge: Linear::zeros(d, d),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.outputs() / self.heads
    }

    pub fn forward_cached(&self, x: &Array2<f64>, source: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(source);
        let v = self.value.forward(source);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged_in = Array2::zeros((x.nrows(), self.query.outputs()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t());
            logits.mapv_inplace(|l| l * scale);
            softmax_rows(&mut logits);
            merged_in.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            probs.push(logits);
        }
        let out = self.merge.forward(&merged_in);
        let cache = AttentionCache { x: x.clone(), source: source.clone(), q, k, v, probs, merged_in };
        (out, cache)
    }

    /// Returns `(dL/dx, dL/dsource)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dmerged = self.merge.backward(&cache.merged_in, dout, &mut grad.merge);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dout_h = dmerged.slice(cols);
            let dp = dout_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
            // softmax backward, row-wise
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut dlogits = p * &(&dp - &row_dot);
            dlogits.mapv_inplace(|g| g * scale);
            dq.slice_mut(cols).assign(&dlogits.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dlogits.t().dot(&cache.q.slice(cols)));
        }
        let dx = self.query.backward(&cache.x, &dq, &mut grad.query);
        let mut dsrc = self.key.backward(&cache.source, &dk, &mut grad.key);
        dsrc += &self.value.backward(&cache.source, &dv, &mut grad.value);
        (dx, dsrc)
    }
}

impl Parameters for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.merge.visit(&join(prefix, "merge"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.merge.visit_mut(&join(prefix, "merge"), f);
    }
}

/// One message-passing layer: `x ← x + MLP([x ‖ attention(x, source)])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    pub attention: MultiHeadAttention,
    pub update: Mlp,
}

#[derive(Debug, Clone)]
pub struct GnnLayerCache {
    attention: AttentionCache,
    update: MlpCache,
}

impl GnnLayer {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        let attention = MultiHeadAttention::init(rng, dim, heads);
        let mut update = Mlp::init(rng, &[2 * dim, 2 * dim, dim]);
        update.last_mut().bias.fill(0.0);
        Self { attention, update }
    }

    pub fn zeros_like(&self) -> Self {
        Self { attention: self.attention.zeros_like(), update: self.update.zeros_like() }
    }

    pub fn forward_cached(&self, x: &Array2<f64>, source: &Array2<f64>) -> (Array2<f64>, GnnLayerCache) {
        let (message, attention) = self.attention.forward_cached(x, source);
        let joined = ndarray::concatenate(Axis(1), &[x.view(), message.view()]).expect("equal row counts");
        let (delta, update) = self.update.forward_cached(&joined);
        (x + &delta, GnnLayerCache { attention, update })
    }

    /// Returns `(dL/dx, dL/dsource)`.
    pub fn backward(
        &self,
        cache: &GnnLayerCache,
        dout: &Array2<f64>,
        grad: &mut GnnLayer,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = dout.ncols();
        let djoined = self.update.backward(&cache.update, dout, &mut grad.update);
        let mut dx = dout + &djoined.slice(s![.., ..d]);
        let dmessage = djoined.slice(s![.., d..]).to_owned();
        let (dx_attn, dsrc) = self.attention.backward(&cache.attention, &dmessage, &mut grad.attention);
        dx += &dx_attn;
        (dx, dsrc)
    }
}

impl Parameters for GnnLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.update.visit(&join(prefix, "update"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.update.visit_mut(&join(prefix, "update"), f);
    }
}
