use crate::error::{shape_err, Result};
use crate::numerics::{dot, matmul_t_unchecked, matmul_unchecked, t_matmul_unchecked, Matrix, ParamSet, RngState};

/// Causal multi-head self-attention. Projections are `out x in`
/// (`d_model x d_model`) and applied as `x · Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
}

pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Softmax weights, one `seq x seq` block per (sequence, head), row-major.
    probs: Vec<Vec<f64>>,
    mixed: Matrix,
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = matmul_t_unchecked(x, w);
    y.add_row_broadcast(b).expect("bias shape checked by caller");
    y
}

impl Attention {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, d),
            b_q: Matrix::zeros(1, d),
            w_k: Matrix::zeros(d, d),
            b_k: Matrix::zeros(1, d),
            w_v: Matrix::zeros(d, d),
            b_v: Matrix::zeros(1, d),
            w_o: Matrix::zeros(d, d),
            b_o: Matrix::zeros(1, d),
        }
    }

    pub fn random(d: usize, std: f64, rng: &mut RngState) -> Self {
        let mut a = Self::zeros(d);
        for w in [&mut a.w_q, &mut a.w_k, &mut a.w_v, &mut a.w_o] {
            for v in w.as_mut_slice() {
                *v = std * rng.normal();
            }
        }
        a
    }

    fn check(&self, d: usize) -> Result<()> {
        for (i, t) in self.tensors().iter().enumerate() {
            let expected = if i % 2 == 0 { (d, d) } else { (1, d) };
            if t.shape() != expected {
                return Err(shape_err(
                    "Attention",
                    format!("{expected:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `x` holds `x.rows() / seq_len` sequences of `seq_len` consecutive rows.
    /// Position `t` attends to positions `0..=t` of its own sequence.
    pub fn forward(&self, x: &Matrix, seq_len: usize, n_heads: usize) -> Result<(Matrix, AttentionCache)> {
        let d = x.cols();
        self.check(d)?;
        if seq_len == 0 || !x.rows().is_multiple_of(seq_len) || !d.is_multiple_of(n_heads) {
            return Err(shape_err(
                "Attention::forward",
                format!("rows divisible by seq_len {seq_len}, d divisible by {n_heads} heads"),
                format!("{:?}", x.shape()),
            ));
        }
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = linear(x, &self.w_q, &self.b_q);
        let k = linear(x, &self.w_k, &self.b_k);
        let v = linear(x, &self.w_v, &self.b_v);
        let n_seq = x.rows() / seq_len;
        let mut mixed = Matrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(n_seq * n_heads);
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..n_heads {
                let cols = h * hd..(h + 1) * hd;
                let mut p = vec![0.0; seq_len * seq_len];
                for t in 0..seq_len {
                    let qt = &q.row(base + t)[cols.clone()];
                    let row = &mut p[t * seq_len..(t + 1) * seq_len];
                    let mut max = f64::NEG_INFINITY;
                    for (u, r) in row.iter_mut().enumerate().take(t + 1) {
                        let sc = dot(qt, &k.row(base + u)[cols.clone()]) * scale;
                        *r = sc;
                        max = max.max(sc);
                    }
                    let mut denom = 0.0;
                    for r in row.iter_mut().take(t + 1) {
                        *r = (*r - max).exp();
                        denom += *r;
                    }
                    for r in row.iter_mut().take(t + 1) {
                        *r /= denom;
                    }
                    let out = &mut mixed.row_mut(base + t)[cols.clone()];
                    for (u, &w) in row.iter().enumerate().take(t + 1) {
                        for (o, vv) in out.iter_mut().zip(&v.row(base + u)[cols.clone()]) {
                            *o += w * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let y = linear(&mixed, &self.w_o, &self.b_o);
        Ok((y, AttentionCache { q, k, v, probs, mixed }))
    }

    /// Returns parameter gradients and `d_x`.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &AttentionCache,
        d_y: &Matrix,
        seq_len: usize,
        n_heads: usize,
    ) -> (Attention, Matrix) {
        let d = x.cols();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n_seq = x.rows() / seq_len;

        let d_mixed = matmul_unchecked(d_y, &self.w_o);
        let mut dq = Matrix::zeros(x.rows(), d);
        let mut dk = Matrix::zeros(x.rows(), d);
        let mut dv = Matrix::zeros(x.rows(), d);
        let mut dp = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..n_heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &cache.probs[s * n_heads + h];
                for t in 0..seq_len {
                    let dout = &d_mixed.row(base + t)[cols.clone()];
                    let prow = &p[t * seq_len..(t + 1) * seq_len];
                    let mut weighted = 0.0;
                    for u in 0..=t {
                        dp[u] = dot(dout, &cache.v.row(base + u)[cols.clone()]);
                        weighted += dp[u] * prow[u];
                        let dvu = &mut dv.row_mut(base + u)[cols.clone()];
                        for (g, o) in dvu.iter_mut().zip(dout) {
                            *g += prow[u] * o;
                        }
                    }
                    for u in 0..=t {
                        let ds = prow[u] * (dp[u] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ku = &cache.k.row(base + u)[cols.clone()];
                        let dqt = &mut dq.row_mut(base + t)[cols.clone()];
                        for (g, kv) in dqt.iter_mut().zip(ku) {
                            *g += ds * kv;
                        }
                        let qt = &cache.q.row(base + t)[cols.clone()];
                        let dku = &mut dk.row_mut(base + u)[cols.clone()];
                        for (g, qv) in dku.iter_mut().zip(qt) {
                            *g += ds * qv;
                        }
                    }
                }
            }
        }
        let grads = Attention {
            w_q: t_matmul_unchecked(&dq, x),
            b_q: dq.column_sums(),
            w_k: t_matmul_unchecked(&dk, x),
            b_k: dk.column_sums(),
            w_v: t_matmul_unchecked(&dv, x),
            b_v: dv.column_sums(),
            w_o: t_matmul_unchecked(d_y, &cache.mixed),
            b_o: d_y.column_sums(),
        };
        let mut dx = matmul_unchecked(&dq, &self.w_q);
        dx.add_assign(&matmul_unchecked(&dk, &self.w_k)).expect("same shape");
        dx.add_assign(&matmul_unchecked(&dv, &self.w_v)).expect("same shape");
        (grads, dx)
    }
}

impl ParamSet for Attention {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}
