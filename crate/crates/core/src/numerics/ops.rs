//! Differentiable primitives with explicit forward/backward pairs.

use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of `relu`; the subgradient at exactly zero is zero.
pub fn relu_backward(d_out: &Matrix, x: &Matrix) -> Result<Matrix> {
    if !d_out.same_shape(x) {
        return Err(shape_err(
            "relu_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", d_out.shape()),
        ));
    }
    let data = d_out
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Per-row statistics saved by [`layernorm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
pub fn layernorm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(shape_err(
            "layernorm",
            format!("gain/bias 1x{d}"),
            format!("{:?}/{:?}", gain.shape(), bias.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layernorm eps must be > 0, got {eps}")));
    }
    let mut y = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let (g, b) = (gain.as_slice(), bias.as_slice());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let n_row = normalized.row_mut(r);
        for c in 0..d {
            n_row[c] = (row[c] - mean) * istd;
        }
        let y_row = y.row_mut(r);
        for c in 0..d {
            y_row[c] = g[c] * normalized.get(r, c) + b[c];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(d_x, d_gain, d_bias)`.
pub fn layernorm_backward(d_out: &Matrix, cache: &LayerNormCache, gain: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (n, d) = d_out.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let g = gain.as_slice();
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dy = d_out.row(r);
        let xhat = cache.normalized.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..d {
            dgain.as_mut_slice()[c] += dy[c] * xhat[c];
            dbias.as_mut_slice()[c] += dy[c];
            dxhat[c] = dy[c] * g[c];
            sum_dxhat += dxhat[c];
            sum_dxhat_xhat += dxhat[c] * xhat[c];
        }
        let scale = cache.inv_std[r] / d as f64;
        let dx_row = dx.row_mut(r);
        for c in 0..d {
            dx_row[c] = scale * (d as f64 * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, and its gradient `(softmax − one_hot) / rows`.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{n} targets"),
            format!("{} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: v });
    }
    let mut grad = Matrix::zeros(n, v);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let g_row = grad.row_mut(r);
        for (g, &z) in g_row.iter_mut().zip(row) {
            *g = (z - max).exp();
            denom += *g;
        }
        let log_denom = denom.ln();
        total += -(row[targets[r]] - max - log_denom);
        for g in g_row.iter_mut() {
            *g = *g / denom * inv_n;
        }
        g_row[targets[r]] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Loss only; same arithmetic as [`softmax_cross_entropy`] without the gradient buffer.
/// Returns the summed (not averaged) negative log-likelihood.
pub fn cross_entropy_sum(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(shape_err(
            "cross_entropy_sum",
            format!("{n} targets"),
            format!("{} targets", targets.len()),
        ));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
        total += -(row[t] - max - denom.ln());
    }
    Ok(total)
}
