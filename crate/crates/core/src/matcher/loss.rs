use ndarray::Array2;

use super::MatcherError;
use crate::scenegen::MatchLabels;

fn check(rows: usize, cols: usize, labels: &MatchLabels) -> Result<usize, MatcherError> {
    let (m, n) = (rows - 1, cols - 1);
    let bad = labels.matches.iter().any(|&(i, j)| i >= m || j >= n)
        || labels.unmatched_a.iter().any(|&i| i >= m)
        || labels.unmatched_b.iter().any(|&j| j >= n);
    if bad {
        return Err(MatcherError::ShapeMismatch(format!("label index outside a {m}x{n} assignment")));
    }
    let count = labels.num_supervised();
    if count == 0 {
        return Err(MatcherError::EmptySupervision);
    }
    Ok(count)
}

/// Mean negative log-likelihood of the supervised cells: GT match cells and
/// the dustbin cells of labeled-unmatched keypoints. Ignored keypoints do
/// not contribute.
pub fn assignment_loss(p: &Array2<f64>, labels: &MatchLabels) -> Result<f64, MatcherError> {
    let count = check(p.nrows(), p.ncols(), labels)?;
    let (m, n) = (p.nrows() - 1, p.ncols() - 1);
    let mut total = 0.0;
    for &(i, j) in &labels.matches {
        total -= p[(i, j)].ln();
    }
    for &i in &labels.unmatched_a {
        total -= p[(i, n)].ln();
    }
    for &j in &labels.unmatched_b {
        total -= p[(m, j)].ln();
    }
    Ok(total / count as f64)
}

/// Same loss evaluated on log-probabilities, with its gradient.
pub fn log_assignment_loss(log_p: &Array2<f64>, labels: &MatchLabels) -> Result<(f64, Array2<f64>), MatcherError> {
    let count = check(log_p.nrows(), log_p.ncols(), labels)?;
    let (m, n) = (log_p.nrows() - 1, log_p.ncols() - 1);
    let w = 1.0 / count as f64;
    let mut grad = Array2::zeros(log_p.raw_dim());
    let mut total = 0.0;
    let cells = labels
        .matches
        .iter()
        .copied()
        .chain(labels.unmatched_a.iter().map(|&i| (i, n)))
        .chain(labels.unmatched_b.iter().map(|&j| (m, j)));
    for (i, j) in cells {
        total -= log_p[(i, j)];
        grad[(i, j)] -= w;
    }
    let loss = total * w;
    if !loss.is_finite() {
        return Err(MatcherError::NonFiniteLoss(loss));
    }
    Ok((loss, grad))
}
