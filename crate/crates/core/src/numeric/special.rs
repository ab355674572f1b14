use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// `log Σ exp(v_i)` with a max shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Replaces `v` by `softmax(v)`; returns the log-normaliser.
pub fn softmax_in_place(v: &mut [f64]) -> Result<f64> {
    let lse = logsumexp(v)?;
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    Ok(lse)
}

/// Squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
pub fn pairwise_sqdist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "pairwise_sqdist: {} vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let bj = b.row(j);
            *o = ai
                .iter()
                .zip(bj)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum();
        }
    }
    Ok(out)
}
