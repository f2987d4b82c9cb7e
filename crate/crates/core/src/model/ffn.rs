use crate::error::{shape_err, Result};
use crate::numerics::{matmul_t_unchecked, matmul_unchecked, t_matmul_unchecked, Matrix, ParamSet, RngState};

/// Dense feed-forward block `y = W_out · relu(W_in · x + b_in) + b_out`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `d_ff x d_model`; row `j` is neuron `j`'s input weights.
    pub w_in: Matrix,
    /// `1 x d_ff`
    pub b_in: Matrix,
    /// `d_model x d_ff`; column `j` is neuron `j`'s output weights.
    pub w_out: Matrix,
    /// `1 x d_model`
    pub b_out: Matrix,
}

pub struct FfnForward {
    pub y: Matrix,
    /// Post-ReLU hidden activations, `tokens x d_ff`.
    pub hidden: Matrix,
}

impl FfnWeights {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d_ff, d_model),
            b_in: Matrix::zeros(1, d_ff),
            w_out: Matrix::zeros(d_model, d_ff),
            b_out: Matrix::zeros(1, d_model),
        }
    }

    pub fn random(d_model: usize, d_ff: usize, std: f64, rng: &mut RngState) -> Self {
        let mut w = Self::zeros(d_model, d_ff);
        for v in w.w_in.as_mut_slice() {
            *v = std * rng.normal();
        }
        for v in w.w_out.as_mut_slice() {
            *v = std * rng.normal();
        }
        w
    }

    pub fn d_model(&self) -> usize {
        self.w_in.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.w_in.rows()
    }

    pub fn check(&self) -> Result<()> {
        let (f, d) = self.w_in.shape();
        if self.b_in.shape() != (1, f) || self.w_out.shape() != (d, f) || self.b_out.shape() != (1, d) {
            return Err(shape_err(
                "FfnWeights",
                format!("w_in {f}x{d}, b_in 1x{f}, w_out {d}x{f}, b_out 1x{d}"),
                format!(
                    "b_in {:?}, w_out {:?}, b_out {:?}",
                    self.b_in.shape(),
                    self.w_out.shape(),
                    self.b_out.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl ParamSet for FfnWeights {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out]
    }
}

pub fn ffn_forward(w: &FfnWeights, x: &Matrix) -> Result<FfnForward> {
    w.check()?;
    if x.cols() != w.d_model() {
        return Err(shape_err(
            "ffn_forward",
            format!("x with {} cols", w.d_model()),
            format!("{:?}", x.shape()),
        ));
    }
    let mut hidden = matmul_t_unchecked(x, &w.w_in);
    let b_in = w.b_in.as_slice();
    for t in 0..hidden.rows() {
        for (h, b) in hidden.row_mut(t).iter_mut().zip(b_in) {
            let pre = *h + b;
            *h = if pre > 0.0 { pre } else { 0.0 };
        }
    }
    let mut y = matmul_t_unchecked(&hidden, &w.w_out);
    y.add_row_broadcast(&w.b_out)?;
    Ok(FfnForward { y, hidden })
}

/// Returns parameter gradients and `d_x`. `hidden` is the post-ReLU output of
/// the matching forward call; its positive entries define the ReLU mask.
pub fn ffn_backward(w: &FfnWeights, x: &Matrix, hidden: &Matrix, d_y: &Matrix) -> Result<(FfnWeights, Matrix)> {
    if d_y.shape() != (x.rows(), w.d_model()) || hidden.shape() != (x.rows(), w.d_ff()) {
        return Err(shape_err(
            "ffn_backward",
            format!("d_y {}x{}", x.rows(), w.d_model()),
            format!("{:?}", d_y.shape()),
        ));
    }
    let mut d_hidden = matmul_unchecked(d_y, &w.w_out);
    for (g, &h) in d_hidden.as_mut_slice().iter_mut().zip(hidden.as_slice()) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    let grads = FfnWeights {
        w_in: t_matmul_unchecked(&d_hidden, x),
        b_in: d_hidden.column_sums(),
        w_out: t_matmul_unchecked(d_y, hidden),
        b_out: d_y.column_sums(),
    };
    let d_x = matmul_unchecked(&d_hidden, &w.w_in);
    Ok((grads, d_x))
}
