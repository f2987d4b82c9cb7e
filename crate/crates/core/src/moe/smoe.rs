use std::cmp::Ordering;

use crate::clustering::Partition;
use crate::error::{shape_err, Error, Result};
use crate::model::FfnWeights;
use crate::moe::dynamic_topk;
use crate::numerics::{dot, matmul_t_unchecked, matmul_unchecked, t_matmul_unchecked, Matrix, ParamSet};

/// One slice of a dense FFN: `expert_size` neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// `expert_size x d_model`
    pub w_in: Matrix,
    /// `1 x expert_size`
    pub b_in: Matrix,
    /// `d_model x expert_size`
    pub w_out: Matrix,
}

/// A dense FFN split into `N` equally sized experts, of which `top_k` run per token.
///
/// `row_order[n][m]` is the original neuron index of row `m` of expert `n`;
/// it is ascending within each expert and is what [`merge_experts`] inverts.
/// The output bias is shared and added once.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoeFfn {
    experts: Vec<Expert>,
    b_out: Matrix,
    top_k: usize,
    partition: Partition,
    row_order: Vec<Vec<usize>>,
}

/// Per-token routing result.
///
/// The effective coefficient of a selected expert is exactly `1` in value, but
/// its derivative with respect to the raw score is `1` as well
/// (`1 + α − stop_grad(α)`); unselected experts get `0` with no derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Raw scores `α_n = x · c_n` for every expert.
    pub scores: Vec<f64>,
    /// Selected experts, highest score first.
    pub selected: Vec<usize>,
}

impl GateDecision {
    pub fn is_selected(&self, expert: usize) -> bool {
        self.selected.contains(&expert)
    }

    pub fn coefficient(&self, expert: usize) -> f64 {
        if self.is_selected(expert) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Routing {
    /// Fixed `top_k` experts per token.
    TopK,
    /// `top_k` candidates per token, then batch-level truncation of the
    /// lowest-scoring pairs.
    Dynamic { truncation_ratio: f64 },
}

pub struct SmoeForward {
    pub y: Matrix,
    pub decisions: Vec<GateDecision>,
    pub centroids: Matrix,
    /// Tokens routed to each expert, ascending.
    pub expert_tokens: Vec<Vec<usize>>,
    /// Post-ReLU activations of each expert for its tokens.
    pub expert_hidden: Vec<Matrix>,
}

pub struct SmoeBackward {
    pub grads: SmoeFfn,
    pub d_x: Matrix,
    /// `false` for experts no token in the batch selected; their gradients are exactly zero.
    pub active: Vec<bool>,
}

impl SmoeFfn {
    /// Assembles an SMoE from stored parts, checking shapes and the row-order record.
    pub fn from_parts(
        experts: Vec<Expert>,
        b_out: Matrix,
        top_k: usize,
        partition: Partition,
        row_order: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = partition.n_clusters();
        if experts.len() != n || row_order.len() != n {
            return Err(shape_err(
                "SmoeFfn::from_parts",
                format!("{n} experts"),
                format!("{} experts, {} row-order lists", experts.len(), row_order.len()),
            ));
        }
        let d = b_out.cols();
        let size = partition.cluster_size();
        for (i, e) in experts.iter().enumerate() {
            if e.w_in.shape() != (size, d) || e.b_in.shape() != (1, size) || e.w_out.shape() != (d, size) {
                return Err(shape_err(
                    "SmoeFfn::from_parts",
                    format!("expert {i}: w_in {size}x{d}, b_in 1x{size}, w_out {d}x{size}"),
                    format!("{:?} {:?} {:?}", e.w_in.shape(), e.b_in.shape(), e.w_out.shape()),
                ));
            }
        }
        let m = Self {
            experts,
            b_out,
            top_k: 1,
            partition,
            row_order,
        };
        m.validate_row_order()?;
        let mut m = m;
        m.set_top_k(top_k)?;
        Ok(m)
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }

    pub fn b_out(&self) -> &Matrix {
        &self.b_out
    }

    pub fn b_out_mut(&mut self) -> &mut Matrix {
        &mut self.b_out
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_experts() {
            return Err(Error::InvalidArgument(format!(
                "top_k must be in 1..={}, got {k}",
                self.n_experts()
            )));
        }
        self.top_k = k;
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_size(&self) -> usize {
        self.partition.cluster_size()
    }

    pub fn d_model(&self) -> usize {
        self.b_out.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.partition.len()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn row_order(&self) -> &[Vec<usize>] {
        &self.row_order
    }

    /// Direct access for corruption tests; [`merge_experts`] re-validates.
    #[doc(hidden)]
    pub fn row_order_mut(&mut self) -> &mut Vec<Vec<usize>> {
        &mut self.row_order
    }

    /// The row-order record must be a permutation of `0..d_ff` that agrees
    /// with the partition and is ascending within each expert.
    pub fn validate_row_order(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidArgument(format!("corrupted row-order record: {msg}"));
        let d_ff = self.d_ff();
        let mut seen = vec![false; d_ff];
        for (e, rows) in self.row_order.iter().enumerate() {
            if rows.len() != self.expert_size() {
                return Err(bad(format!("expert {e} lists {} rows", rows.len())));
            }
            for (m, &j) in rows.iter().enumerate() {
                if j >= d_ff || seen[j] {
                    return Err(bad(format!("neuron {j} out of range or repeated")));
                }
                if self.partition.assignment()[j] != e {
                    return Err(bad(format!("neuron {j} listed under expert {e}")));
                }
                if m > 0 && rows[m - 1] >= j {
                    return Err(bad(format!("expert {e} rows not ascending")));
                }
                seen[j] = true;
            }
        }
        Ok(())
    }

    /// `(expert, row)` holding each original neuron.
    fn neuron_slots(&self) -> Vec<(usize, usize)> {
        let mut slots = vec![(0, 0); self.d_ff()];
        for (e, rows) in self.row_order.iter().enumerate() {
            for (m, &j) in rows.iter().enumerate() {
                slots[j] = (e, m);
            }
        }
        slots
    }

    /// Update mask in [`ParamSet`] order: three tensors per expert, then `b_out`.
    pub fn tensor_mask(&self, active: &[bool]) -> Vec<bool> {
        let mut mask: Vec<bool> = active.iter().flat_map(|&a| [a, a, a]).collect();
        mask.push(true);
        mask
    }
}

impl ParamSet for SmoeFfn {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.experts.iter().flat_map(|e| [&e.w_in, &e.b_in, &e.w_out]).collect();
        v.push(&self.b_out);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self
            .experts
            .iter_mut()
            .flat_map(|e| [&mut e.w_in, &mut e.b_in, &mut e.w_out])
            .collect();
        v.push(&mut self.b_out);
        v
    }
}

/// Routes rows of `W_in`/`b_in` and columns of `W_out` to experts by `p`,
/// keeping ascending original order inside each expert.
pub fn split_ffn(w: &FfnWeights, p: &Partition, top_k: usize) -> Result<SmoeFfn> {
    w.check()?;
    if p.len() != w.d_ff() {
        return Err(shape_err(
            "split_ffn",
            format!("partition over {} neurons", w.d_ff()),
            format!("{}", p.len()),
        ));
    }
    // re-validate balance; a Partition can only be built balanced, but be explicit
    let p = Partition::new(p.assignment().to_vec(), p.n_clusters())?;
    let row_order = p.members();
    let d = w.d_model();
    let experts = row_order
        .iter()
        .map(|rows| {
            let mut w_out = Matrix::zeros(d, rows.len());
            for r in 0..d {
                let src = w.w_out.row(r);
                for (m, &j) in rows.iter().enumerate() {
                    w_out.set(r, m, src[j]);
                }
            }
            Expert {
                w_in: w.w_in.select_rows(rows),
                b_in: Matrix::row_vector(&rows.iter().map(|&j| w.b_in.as_slice()[j]).collect::<Vec<_>>()),
                w_out,
            }
        })
        .collect();
    SmoeFfn::from_parts(experts, w.b_out.clone(), top_k, p, row_order)
}

/// Concatenates experts back into dense weights using the stored row order.
pub fn merge_experts(m: &SmoeFfn) -> Result<FfnWeights> {
    m.validate_row_order()?;
    let (d, f) = (m.d_model(), m.d_ff());
    let mut w = FfnWeights::zeros(d, f);
    for (e, rows) in m.row_order.iter().enumerate() {
        let ex = &m.experts[e];
        for (loc, &j) in rows.iter().enumerate() {
            w.w_in.row_mut(j).copy_from_slice(ex.w_in.row(loc));
            w.b_in.as_mut_slice()[j] = ex.b_in.as_slice()[loc];
            for r in 0..d {
                w.w_out.set(r, j, ex.w_out.get(r, loc));
            }
        }
    }
    w.b_out = m.b_out.clone();
    Ok(w)
}

/// `c_n = (N / d_ff) · Σ_m W_in,n[m]`, the mean input-weight row of each expert.
pub fn compute_centroids(m: &SmoeFfn) -> Matrix {
    let scale = m.n_experts() as f64 / m.d_ff() as f64;
    let mut c = Matrix::zeros(m.n_experts(), m.d_model());
    for (n, e) in m.experts.iter().enumerate() {
        let row = c.row_mut(n);
        for r in 0..e.w_in.rows() {
            for (acc, v) in row.iter_mut().zip(e.w_in.row(r)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v *= scale);
    }
    c
}

/// Top-`k` experts by score, ties to the lower index.
pub(crate) fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn gate(m: &SmoeFfn, x: &[f64]) -> Result<GateDecision> {
    if x.len() != m.d_model() {
        return Err(shape_err(
            "gate",
            format!("{} features", m.d_model()),
            format!("{}", x.len()),
        ));
    }
    let c = compute_centroids(m);
    let scores: Vec<f64> = (0..m.n_experts()).map(|n| dot(x, c.row(n))).collect();
    let selected = select_top_k(&scores, m.top_k);
    Ok(GateDecision { scores, selected })
}

/// Sparse forward pass.
///
/// Each output row accumulates `h_j · W_out[:, j]` over the selected experts'
/// neurons in ascending original index `j`, onto `0.0`, then adds `b_out`.
/// That is the dense summation order with unselected terms removed, so with
/// every expert selected the result is bit-identical to
/// `ffn_forward(merge_experts(m), x)`.
pub fn smoe_forward(m: &SmoeFfn, x: &Matrix, routing: Routing) -> Result<SmoeForward> {
    if x.cols() != m.d_model() {
        return Err(shape_err(
            "smoe_forward",
            format!("x with {} cols", m.d_model()),
            format!("{:?}", x.shape()),
        ));
    }
    let (tokens, d, n) = (x.rows(), m.d_model(), m.n_experts());
    let centroids = compute_centroids(m);
    let scores = matmul_t_unchecked(x, &centroids);
    let mut decisions: Vec<GateDecision> = (0..tokens)
        .map(|t| {
            let s = scores.row(t).to_vec();
            let selected = select_top_k(&s, m.top_k);
            GateDecision { scores: s, selected }
        })
        .collect();
    if let Routing::Dynamic { truncation_ratio } = routing {
        decisions = dynamic_topk(&decisions, truncation_ratio)?;
    }

    let mut expert_tokens = vec![Vec::new(); n];
    for (t, dec) in decisions.iter().enumerate() {
        for &e in &dec.selected {
            expert_tokens[e].push(t);
        }
    }
    for list in expert_tokens.iter_mut() {
        list.sort_unstable();
    }
    // slot[t * n + e] = row of token t inside expert e's batch
    let mut slot = vec![usize::MAX; tokens * n];
    let mut expert_hidden = Vec::with_capacity(n);
    for (e, toks) in expert_tokens.iter().enumerate() {
        for (r, &t) in toks.iter().enumerate() {
            slot[t * n + e] = r;
        }
        let ex = &m.experts[e];
        let xe = x.select_rows(toks);
        let mut h = matmul_t_unchecked(&xe, &ex.w_in);
        let b = ex.b_in.as_slice();
        for r in 0..h.rows() {
            for (v, bb) in h.row_mut(r).iter_mut().zip(b) {
                let pre = *v + bb;
                *v = if pre > 0.0 { pre } else { 0.0 };
            }
        }
        expert_hidden.push(h);
    }

    let slots = m.neuron_slots();
    let mut y = Matrix::zeros(tokens, d);
    let b_out = m.b_out.as_slice();
    let mut acc = vec![0.0; d];
    for t in 0..tokens {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(e, loc) in &slots {
            let r = slot[t * n + e];
            if r == usize::MAX {
                continue;
            }
            let h = expert_hidden[e].get(r, loc);
            // adding an exact zero product never changes the running sum
            if h == 0.0 {
                continue;
            }
            let w_out = &m.experts[e].w_out;
            for (dd, a) in acc.iter_mut().enumerate() {
                *a += h * w_out.get(dd, loc);
            }
        }
        for ((o, a), b) in y.row_mut(t).iter_mut().zip(&acc).zip(b_out) {
            *o = a + b;
        }
    }
    Ok(SmoeForward {
        y,
        decisions,
        centroids,
        expert_tokens,
        expert_hidden,
    })
}

/// Backward pass of [`smoe_forward`], including the straight-through score
/// path: `∂L/∂α_n = Σ_d ∂L/∂y_d · (W_out,n h_n)_d` for each selected pair,
/// which reaches `x` through `c_n` and each row of `W_in,n` through
/// `∂c_n/∂row = N / d_ff`.
pub fn smoe_backward(m: &SmoeFfn, x: &Matrix, fwd: &SmoeForward, d_y: &Matrix) -> Result<SmoeBackward> {
    if d_y.shape() != (x.rows(), m.d_model()) {
        return Err(shape_err(
            "smoe_backward",
            format!("{}x{}", x.rows(), m.d_model()),
            format!("{:?}", d_y.shape()),
        ));
    }
    let (tokens, d, n) = (x.rows(), m.d_model(), m.n_experts());
    let mut grads = m.zeros_like();
    grads.b_out = d_y.column_sums();
    let mut d_x = Matrix::zeros(tokens, d);
    let mut active = vec![false; n];
    let scale = n as f64 / m.d_ff() as f64;
    for (e, is_active) in active.iter_mut().enumerate() {
        let toks = &fwd.expert_tokens[e];
        if toks.is_empty() {
            continue;
        }
        *is_active = true;
        let ex = &m.experts[e];
        let h = &fwd.expert_hidden[e];
        let xe = x.select_rows(toks);
        let dye = d_y.select_rows(toks);
        let mut d_h = matmul_unchecked(&dye, &ex.w_out);
        let d_alpha: Vec<f64> = (0..toks.len()).map(|r| dot(h.row(r), d_h.row(r))).collect();
        for (g, &hv) in d_h.as_mut_slice().iter_mut().zip(h.as_slice()) {
            if hv <= 0.0 {
                *g = 0.0;
            }
        }
        let ge = &mut grads.experts[e];
        ge.w_out = t_matmul_unchecked(&dye, h);
        ge.w_in = t_matmul_unchecked(&d_h, &xe);
        ge.b_in = d_h.column_sums();
        let dxe = matmul_unchecked(&d_h, &ex.w_in);
        let c = fwd.centroids.row(e);
        let mut d_c = vec![0.0; d];
        for (r, &t) in toks.iter().enumerate() {
            let da = d_alpha[r];
            let xrow = x.row(t);
            for (k, dx) in d_x.row_mut(t).iter_mut().enumerate() {
                *dx += dxe.get(r, k) + da * c[k];
            }
            for (g, xv) in d_c.iter_mut().zip(xrow) {
                *g += da * xv;
            }
        }
        for row in 0..ge.w_in.rows() {
            for (g, dc) in ge.w_in.row_mut(row).iter_mut().zip(&d_c) {
                *g += scale * dc;
            }
        }
    }
    Ok(SmoeBackward { grads, d_x, active })
}
