//! Dense layers with explicit reverse-mode passes. Activations are row-major
//! `(rows = keypoints, cols = channels)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Visits every trainable tensor in a fixed order, with a dotted name and
/// its shape.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all tensors from `flat`, in visiting order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, _, v| v.fill(0.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(in)`.
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.weight.shape(), self.weight.as_slice().expect("standard layout"));
        f(&join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), &shape, self.weight.as_slice_mut().expect("standard layout"));
        let shape = self.bias.shape().to_vec();
        f(&join(prefix, "bias"), &shape, self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Row-wise normalization to zero mean and unit variance (no affine terms).
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let cols = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in y.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    (y, inv_std)
}

pub fn layer_norm_backward(y: &Array2<f64>, inv_std: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let cols = y.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut dxr, yr), s) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter()) {
        let mean_dy = dxr.sum() / cols;
        let mean_dyy = dxr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
        for (d, yv) in dxr.iter_mut().zip(yr.iter()) {
            *d = s * (*d - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

/// Stack of linear layers; every hidden layer is followed by layer
/// normalization and ReLU, the output layer is plain affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn init<R: Rng>(rng: &mut R, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least an input and an output width");
        Self { layers: widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect() }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn last_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("non-empty")
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache { inputs: Vec::new(), normed: Vec::new(), inv_std: Vec::new() };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if i == last {
                return (z, cache);
            }
            let (n, s) = layer_norm(&z);
            h = n.mapv(|v| v.max(0.0));
            cache.normed.push(n);
            cache.inv_std.push(s);
        }
        unreachable!("loop returns at the output layer")
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // through ReLU, then layer norm of layer i's output
                let n = &cache.normed[i];
                ndarray::Zip::from(&mut d).and(n).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                d = layer_norm_backward(n, &cache.inv_std[i], &d);
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Linear::zeros(l.inputs(), l.outputs())).collect() }
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(&mut rng, &[5, 7, 6, 3]);
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = mlp.forward_cached(&x);
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&cache, &w, &mut grad);

        let h = 1e-6;
        for idx in [(0, 0), (2, 3), (3, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (scalar_loss(&mlp.forward(&xp), &w) - scalar_loss(&mlp.forward(&xm), &w)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", dx[idx]);
        }
        let base = mlp.flatten();
        let g = grad.flatten();
        for k in [0, 11, 40, base.len() - 1] {
            let mut p = mlp.clone();
            let mut v = base.clone();
            v[k] += h;
            p.assign_flat(&v);
            let lp = scalar_loss(&p.forward(&x), &w);
            v[k] -= 2.0 * h;
            p.assign_flat(&v);
            let lm = scalar_loss(&p.forward(&x), &w);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 5.0, 1.0]).unwrap();
        let (y, _) = layer_norm(&x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn flatten_round_trip_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(&mut rng, &[2, 3, 1]);
        let mut names = Vec::new();
        mlp.visit("enc", &mut |n, s, _| names.push((n.to_string(), s.to_vec())));
        assert_eq!(names[0], ("enc.0.weight".to_string(), vec![3, 2]));
        assert_eq!(names[3], ("enc.1.bias".to_string(), vec![1]));
        let flat = mlp.flatten();
        assert_eq!(flat.len(), mlp.num_parameters());
        mlp.fill_zero();
        mlp.assign_flat(&flat);
        assert_eq!(mlp.flatten(), flat);
    }
}
