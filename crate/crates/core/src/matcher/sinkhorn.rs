//! Log-domain Sinkhorn normalization of a dustbin-augmented score matrix,
//! with an unrolled reverse pass.

use ndarray::{Array1, Array2};

use super::MatcherError;

/// Soft partial assignment. The last row and column are dustbins.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(M+1) × (N+1)` log-probabilities.
    pub log_p: Array2<f64>,
}

impl Assignment {
    pub fn rows(&self) -> usize {
        self.log_p.nrows() - 1
    }

    pub fn cols(&self) -> usize {
        self.log_p.ncols() - 1
    }

    pub fn probabilities(&self) -> Array2<f64> {
        self.log_p.mapv(f64::exp)
    }

    pub fn transpose(&self) -> Self {
        Self { log_p: self.log_p.t().to_owned() }
    }
}

/// Forward iterates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    couplings: Array2<f64>,
    log_mu: Array1<f64>,
    log_nu: Array1<f64>,
    us: Vec<Array1<f64>>,
    vs: Vec<Array1<f64>>,
}

fn augment(scores: &Array2<f64>, dustbin: f64) -> Array2<f64> {
    let (m, n) = scores.dim();
    let mut z = Array2::from_elem((m + 1, n + 1), dustbin);
    z.slice_mut(ndarray::s![..m, ..n]).assign(scores);
    z
}

fn marginals(m: usize, n: usize) -> (Array1<f64>, Array1<f64>) {
    let mut log_mu = Array1::zeros(m + 1);
    log_mu[m] = (n as f64).ln();
    let mut log_nu = Array1::zeros(n + 1);
    log_nu[n] = (m as f64).ln();
    (log_mu, log_nu)
}

#[inline]
fn log_sum_exp_offset(row: &[f64], offset: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (a, b) in row.iter().zip(offset) {
        max = max.max(a + b);
    }
    let mut sum = 0.0;
    for (a, b) in row.iter().zip(offset) {
        sum += (a + b - max).exp();
    }
    max + sum.ln()
}

/// Normalizes `scores` (`M × N`) augmented with a dustbin row and column
/// holding `dustbin`, toward row marginals `(1, …, 1, N)` and column
/// marginals `(1, …, 1, M)`.
pub fn sinkhorn(scores: &Array2<f64>, dustbin: f64, iterations: usize) -> Result<Assignment, MatcherError> {
    Ok(sinkhorn_traced(scores, dustbin, iterations)?.0)
}

pub fn sinkhorn_traced(
    scores: &Array2<f64>,
    dustbin: f64,
    iterations: usize,
) -> Result<(Assignment, SinkhornTrace), MatcherError> {
    if iterations == 0 {
        return Err(MatcherError::InvalidConfig("sinkhorn needs at least one iteration".into()));
    }
    if !dustbin.is_finite() || scores.iter().any(|s| !s.is_finite()) {
        return Err(MatcherError::NonFiniteScores);
    }
    let (m, n) = scores.dim();
    let z = augment(scores, dustbin);
    let zt = z.t().as_standard_layout().into_owned();
    let (log_mu, log_nu) = marginals(m, n);
    let mut u = Array1::<f64>::zeros(m + 1);
    let mut v = Array1::<f64>::zeros(n + 1);
    let mut us = Vec::with_capacity(iterations);
    let mut vs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let vsl = v.as_slice().expect("contiguous");
        for (i, row) in z.rows().into_iter().enumerate() {
            u[i] = log_mu[i] - log_sum_exp_offset(row.as_slice().expect("contiguous"), vsl);
        }
        let usl = u.as_slice().expect("contiguous");
        for (j, col) in zt.rows().into_iter().enumerate() {
            v[j] = log_nu[j] - log_sum_exp_offset(col.as_slice().expect("contiguous"), usl);
        }
        us.push(u.clone());
        vs.push(v.clone());
    }
    let mut log_p = z.clone();
    for ((i, j), x) in log_p.indexed_iter_mut() {
        *x += u[i] + v[j];
    }
    Ok((Assignment { log_p }, SinkhornTrace { couplings: z, log_mu, log_nu, us, vs }))
}

/// Pulls `dL/dlog_p` back to `(dL/dscores, dL/ddustbin)`.
pub fn sinkhorn_backward(trace: &SinkhornTrace, dlog_p: &Array2<f64>) -> (Array2<f64>, f64) {
    let z = &trace.couplings;
    let (rows, cols) = z.dim();
    let mut dz = dlog_p.clone();
    let mut gu: Array1<f64> = dlog_p.sum_axis(ndarray::Axis(1));
    let mut gv: Array1<f64> = dlog_p.sum_axis(ndarray::Axis(0));
    let zero_v = Array1::<f64>::zeros(cols);
    for t in (0..trace.us.len()).rev() {
        let u = &trace.us[t];
        let v = &trace.vs[t];
        // v_j = log_nu_j - LSE_i(z_ij + u_i)
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                let b = (z[(i, j)] + u[i] + v[j] - trace.log_nu[j]).exp();
                let g = gv[j] * b;
                dz[(i, j)] -= g;
                acc += g;
            }
            gu[i] -= acc;
        }
        // u_i = log_mu_i - LSE_j(z_ij + v_prev_j)
        let v_prev = if t == 0 { &zero_v } else { &trace.vs[t - 1] };
        let mut gv_prev = Array1::<f64>::zeros(cols);
        for i in 0..rows {
            let base = u[i] - trace.log_mu[i];
            let gui = gu[i];
            for j in 0..cols {
                let a = (z[(i, j)] + v_prev[j] + base).exp();
                let g = gui * a;
                dz[(i, j)] -= g;
                gv_prev[j] -= g;
            }
        }
        gu.fill(0.0);
        gv = gv_prev;
    }
    let dscores = dz.slice(ndarray::s![..rows - 1, ..cols - 1]).to_owned();
    let ddustbin = dz.row(rows - 1).sum() + dz.column(cols - 1).sum() - dz[(rows - 1, cols - 1)];
    (dscores, ddustbin)
}

/// A predicted correspondence between keypoint `i` of A and `j` of B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Mutual-argmax extraction over the non-dustbin block: `(i, j)` is kept when
/// `P_ij` is the maximum of row `i` and of column `j` (dustbins included in
/// both maxima) and exceeds `threshold`.
pub fn extract_matches(p: &Array2<f64>, threshold: f64) -> Vec<Match> {
    let (rows, cols) = p.dim();
    if rows < 2 || cols < 2 {
        return Vec::new();
    }
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, v) in it {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let col_best: Vec<usize> = (0..cols - 1)
        .map(|j| argmax(&mut (0..rows).map(|i| (i, p[(i, j)]))))
        .collect();
    let mut out = Vec::new();
    for i in 0..rows - 1 {
        let j = argmax(&mut (0..cols).map(|j| (j, p[(i, j)])));
        if j == cols - 1 {
            continue;
        }
        if col_best[j] == i && p[(i, j)] > threshold {
            out.push(Match { i, j, confidence: p[(i, j)] });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Plain alternating row/column scaling on the exponentiated kernel.
    fn dense_oracle(scores: &Array2<f64>, z: f64, iters: usize) -> Array2<f64> {
        let (m, n) = scores.dim();
        let mut k = Array2::from_elem((m + 1, n + 1), z.exp());
        for ((i, j), s) in scores.indexed_iter() {
            k[(i, j)] = s.exp();
        }
        let mut mu = vec![1.0; m + 1];
        mu[m] = n as f64;
        let mut nu = vec![1.0; n + 1];
        nu[n] = m as f64;
        for _ in 0..iters {
            for i in 0..=m {
                let s: f64 = k.row(i).sum();
                k.row_mut(i).mapv_inplace(|x| x * mu[i] / s);
            }
            for j in 0..=n {
                let s: f64 = k.column(j).sum();
                k.column_mut(j).mapv_inplace(|x| x * nu[j] / s);
            }
        }
        k
    }

    #[test]
    fn dominant_match_converges_to_closed_form() {
        let a = sinkhorn(&ndarray::array![[4.0]], 0.0, 100).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((a.probabilities()[(0, 0)] - expected).abs() < 1e-6);
    }

    #[test]
    fn uniform_scores_give_uniform_block() {
        let a = sinkhorn(&Array2::from_elem((4, 4), 0.3), 0.3, 50).unwrap();
        let p = a.probabilities();
        let v = p[(0, 0)];
        for i in 0..4 {
            for j in 0..4 {
                assert!((p[(i, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_oracle_two_by_two() {
        let s = ndarray::array![[1.2, -0.4], [0.3, 0.9]];
        let got = sinkhorn(&s, 0.5, 100).unwrap().probabilities();
        let want = dense_oracle(&s, 0.5, 100);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{got}\n{want}");
        }
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert_eq!(sinkhorn(&ndarray::array![[f64::NAN]], 1.0, 10), Err(MatcherError::NonFiniteScores));
    }

    #[test]
    fn dustbin_gradient_on_one_by_one_is_analytic() {
        // M = N = 1: the fixed point is doubly stochastic, P = [[p, 1-p], [1-p, p]],
        // and scaling preserves the cross ratio P00 P11 / (P01 P10) = e^{s-z}.
        // Hence p = sigmoid((s - z) / 2) and dlog(p)/dz = -(1 - p) / 2.
        let (s, z) = (0.7, 1.3);
        let (a, tr) = sinkhorn_traced(&ndarray::array![[s]], z, 200).unwrap();
        let p00 = 1.0 / (1.0 + ((z - s) / 2.0f64).exp());
        assert!((a.log_p[(0, 0)].exp() - p00).abs() < 1e-10);
        let mut g = Array2::zeros((2, 2));
        g[(0, 0)] = 1.0;
        let (ds, dz) = sinkhorn_backward(&tr, &g);
        let analytic = -(1.0 - p00) / 2.0;
        assert!((dz - analytic).abs() < 1e-8, "{dz} vs {analytic}");
        assert!((ds[(0, 0)] + analytic).abs() < 1e-8);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = ndarray::array![[0.5, -1.0, 0.2], [1.5, 0.1, -0.3]];
        let w = ndarray::array![[0.3, -0.2, 0.5, 0.1], [0.7, 0.0, -0.4, 0.2], [0.1, 0.9, -0.5, 0.3]];
        let f = |s: &Array2<f64>, z: f64| (sinkhorn(s, z, 30).unwrap().log_p * &w).sum();
        let (_, tr) = sinkhorn_traced(&s, 0.8, 30).unwrap();
        let (ds, dz) = sinkhorn_backward(&tr, &w);
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (0, 1)] {
            let (mut p, mut m) = (s.clone(), s.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (f(&p, 0.8) - f(&m, 0.8)) / (2.0 * h);
            assert!((fd - ds[idx]).abs() < 1e-7, "{fd} vs {}", ds[idx]);
        }
        let fd = (f(&s, 0.8 + h) - f(&s, 0.8 - h)) / (2.0 * h);
        assert!((fd - dz).abs() < 1e-7);
    }

    #[test]
    fn extraction_identity_and_threshold() {
        let mut p = Array2::from_elem((4, 4), 0.01);
        for i in 0..3 {
            p[(i, i)] = 0.9 - 0.1 * i as f64;
        }
        let m = extract_matches(&p, 0.0);
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m[1].confidence, 0.8);
        assert!(extract_matches(&p, 1.0).is_empty());
    }

    proptest! {
        #[test]
        fn marginals_hold_for_bounded_scores(
            m in 1usize..12, n in 1usize..12, seed in 0u64..1000, z in -1.0f64..2.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((m, n), |_| rng.gen_range(-3.0..3.0));
            let p = sinkhorn(&s, z, 100).unwrap().probabilities();
            for i in 0..m {
                prop_assert!((p.row(i).sum() - 1.0).abs() < 1e-4);
            }
            for j in 0..n {
                prop_assert!((p.column(j).sum() - 1.0).abs() < 1e-4);
            }
            for ((i, j), v) in p.indexed_iter() {
                if i < m || j < n {
                    prop_assert!(*v >= 0.0 && *v <= 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn extraction_is_one_to_one_and_mutual(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = Array2::from_shape_fn((6, 7), |_| rng.gen_range(0.0..1.0));
            let got = extract_matches(&p, 0.0);
            // brute-force scan
            let mut want = Vec::new();
            for i in 0..5 {
                for j in 0..6 {
                    let row_max = (0..7).all(|k| p[(i, k)] <= p[(i, j)]);
                    let col_max = (0..6).all(|k| p[(k, j)] <= p[(i, j)]);
                    if row_max && col_max && p[(i, j)] > 0.0 {
                        want.push((i, j));
                    }
                }
            }
            prop_assert_eq!(got.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), want);
        }
    }
}
