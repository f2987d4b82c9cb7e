use crate::error::{shape_err, Error, Result};
use crate::model::attention::{Attention, AttentionCache};
use crate::model::{ffn_backward, ffn_forward, FfnWeights, ModelConfig};
use crate::moe::{merge_experts, smoe_backward, smoe_forward, Routing, SmoeFfn, SmoeForward};
use crate::numerics::ops::{cross_entropy_sum, layernorm, layernorm_backward, softmax_cross_entropy, LayerNormCache};
use crate::numerics::{matmul_t_unchecked, matmul_unchecked, t_matmul_unchecked, Matrix, ParamSet, RngState};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// The FFN of a block, computed either densely or as a mixture of experts.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Dense(FfnWeights),
    Sparse(SmoeFfn),
}

impl FeedForward {
    pub fn is_sparse(&self) -> bool {
        matches!(self, FeedForward::Sparse(_))
    }

    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            FeedForward::Dense(w) => w.tensors(),
            FeedForward::Sparse(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            FeedForward::Dense(w) => w.tensors_mut(),
            FeedForward::Sparse(m) => m.tensors_mut(),
        }
    }
}

/// Pre-LN transformer block: `x + attn(ln1(x))`, then `+ ffn(ln2(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub attn: Attention,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ffn: FeedForward,
}

enum FfnCache {
    Dense(Matrix),
    Sparse(SmoeForward),
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Matrix,
    attn: AttentionCache,
    ln2: LayerNormCache,
    b: Matrix,
    ffn: FfnCache,
}

impl Block {
    pub fn new(config: &ModelConfig, rng: &mut RngState) -> Self {
        let d = config.d_model;
        Self {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            attn: Attention::random(d, INIT_STD, rng),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            ffn: FeedForward::Dense(FfnWeights::random(d, config.d_ff, INIT_STD, rng)),
        }
    }

    /// Forward over `x.rows() / seq_len` stacked sequences.
    pub fn forward(&self, x: &Matrix, seq_len: usize, n_heads: usize, routing: Routing) -> Result<Matrix> {
        Ok(self.forward_cached(x, seq_len, n_heads, routing)?.0)
    }

    fn forward_cached(
        &self,
        x: &Matrix,
        seq_len: usize,
        n_heads: usize,
        routing: Routing,
    ) -> Result<(Matrix, BlockCache)> {
        let (a, ln1) = layernorm(x, &self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let (att, attn) = self.attn.forward(&a, seq_len, n_heads)?;
        let mut x1 = x.clone();
        x1.add_assign(&att)?;
        let (b, ln2) = layernorm(&x1, &self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        let (f, ffn) = match &self.ffn {
            FeedForward::Dense(w) => {
                let out = ffn_forward(w, &b)?;
                (out.y, FfnCache::Dense(out.hidden))
            }
            FeedForward::Sparse(m) => {
                let mut out = smoe_forward(m, &b, routing)?;
                let y = std::mem::replace(&mut out.y, Matrix::zeros(0, 0));
                (y, FfnCache::Sparse(out))
            }
        };
        x1.add_assign(&f)?;
        Ok((
            x1,
            BlockCache {
                ln1,
                a,
                attn,
                ln2,
                b,
                ffn,
            },
        ))
    }

    /// Returns `(grads, d_x, active_experts)`; the last is empty for dense FFNs.
    fn backward(
        &self,
        cache: &BlockCache,
        d_y: &Matrix,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<(Block, Matrix, Vec<bool>)> {
        let (ffn_grads, d_b, active) = match (&self.ffn, &cache.ffn) {
            (FeedForward::Dense(w), FfnCache::Dense(hidden)) => {
                let (g, db) = ffn_backward(w, &cache.b, hidden, d_y)?;
                (FeedForward::Dense(g), db, Vec::new())
            }
            (FeedForward::Sparse(m), FfnCache::Sparse(fwd)) => {
                let back = smoe_backward(m, &cache.b, fwd, d_y)?;
                (FeedForward::Sparse(back.grads), back.d_x, back.active)
            }
            _ => unreachable!("cache built by the same block"),
        };
        let (dx1_ln, d_ln2_gain, d_ln2_bias) = layernorm_backward(&d_b, &cache.ln2, &self.ln2_gain);
        let mut d_x1 = d_y.clone();
        d_x1.add_assign(&dx1_ln)?;
        let (attn_grads, d_a) = self.attn.backward(&cache.a, &cache.attn, &d_x1, seq_len, n_heads);
        let (dx_ln, d_ln1_gain, d_ln1_bias) = layernorm_backward(&d_a, &cache.ln1, &self.ln1_gain);
        let mut d_x = d_x1;
        d_x.add_assign(&dx_ln)?;
        Ok((
            Block {
                ln1_gain: d_ln1_gain,
                ln1_bias: d_ln1_bias,
                attn: attn_grads,
                ln2_gain: d_ln2_gain,
                ln2_bias: d_ln2_bias,
                ffn: ffn_grads,
            },
            d_x,
            active,
        ))
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.ln1_gain, &self.ln1_bias];
        v.extend(self.attn.tensors());
        v.push(&self.ln2_gain);
        v.push(&self.ln2_bias);
        v.extend(self.ffn.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.ln1_gain, &mut self.ln1_bias];
        v.extend(self.attn.tensors_mut());
        v.push(&mut self.ln2_gain);
        v.push(&mut self.ln2_bias);
        v.extend(self.ffn.tensors_mut());
        v
    }
}

/// Decoder-only language model: learned token and position embeddings,
/// pre-LN blocks with ReLU FFNs, final layer norm, untied output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gpt {
    pub config: ModelConfig,
    /// `vocab x d_model`
    pub tok_emb: Matrix,
    /// `max_seq_len x d_model`
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// `vocab x d_model`
    pub lm_head: Matrix,
}

/// Gradients, update mask, and captured activations from [`Gpt::lm_loss`].
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gpt,
    /// One entry per tensor in [`ParamSet`] order; `false` marks experts that
    /// no token selected.
    pub update_mask: Vec<bool>,
    /// Post-ReLU FFN activations per dense layer (`None` for sparse layers).
    pub hidden: Vec<Option<Matrix>>,
}

struct Prepared {
    inputs: Vec<usize>,
    targets: Vec<usize>,
    seq_len: usize,
}

impl Gpt {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut normal = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| INIT_STD * rng.normal()).collect()).expect("sized")
        };
        let tok_emb = normal(config.vocab_size, d);
        let pos_emb = normal(config.max_seq_len, d);
        let lm_head = normal(config.vocab_size, d);
        let blocks = (0..config.n_layers).map(|_| Block::new(&config, rng)).collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
            lm_head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_sparse(&self) -> bool {
        self.blocks.iter().any(|b| b.ffn.is_sparse())
    }

    /// Sequences of `T + 1` tokens become `T` inputs and `T` next-token targets.
    fn prepare(&self, batch: &[Vec<usize>]) -> Result<Prepared> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let total = first.len();
        if total < 2 {
            return Err(Error::InvalidArgument("sequences need at least two tokens".into()));
        }
        let seq_len = total - 1;
        if seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: self.config.max_seq_len,
            });
        }
        let mut inputs = Vec::with_capacity(batch.len() * seq_len);
        let mut targets = Vec::with_capacity(batch.len() * seq_len);
        for seq in batch {
            if seq.len() != total {
                return Err(shape_err(
                    "lm_loss",
                    format!("sequences of {total} tokens"),
                    format!("{}", seq.len()),
                ));
            }
            if let Some(&id) = seq.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            inputs.extend_from_slice(&seq[..seq_len]);
            targets.extend_from_slice(&seq[1..]);
        }
        Ok(Prepared {
            inputs,
            targets,
            seq_len,
        })
    }

    fn embed(&self, p: &Prepared) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(p.inputs.len(), d);
        for (r, &id) in p.inputs.iter().enumerate() {
            let pos = r % p.seq_len;
            let row = x.row_mut(r);
            for ((o, a), b) in row.iter_mut().zip(self.tok_emb.row(id)).zip(self.pos_emb.row(pos)) {
                *o = a + b;
            }
        }
        x
    }

    /// Final hidden states (after the last block, before the final norm).
    pub fn hidden_states(&self, batch: &[Vec<usize>], routing: Routing) -> Result<Matrix> {
        let p = self.prepare(batch)?;
        let mut x = self.embed(&p);
        for b in &self.blocks {
            x = b.forward(&x, p.seq_len, self.config.n_heads, routing)?;
        }
        Ok(x)
    }

    /// Logits for every input position, `(batch · T) x vocab`.
    pub fn logits(&self, batch: &[Vec<usize>], routing: Routing) -> Result<Matrix> {
        let x = self.hidden_states(batch, routing)?;
        let (xf, _) = layernorm(&x, &self.lnf_gain, &self.lnf_bias, LN_EPS)?;
        Ok(matmul_t_unchecked(&xf, &self.lm_head))
    }

    /// Summed next-token NLL and the number of predicted tokens.
    pub fn eval_nll(&self, batch: &[Vec<usize>], routing: Routing) -> Result<(f64, usize)> {
        let p = self.prepare(batch)?;
        let logits = self.logits(batch, routing)?;
        Ok((cross_entropy_sum(&logits, &p.targets)?, p.targets.len()))
    }

    /// Post-ReLU FFN activations of every layer, computed densely (sparse
    /// layers are evaluated through their merged weights, which is the same
    /// function as routing every token to every expert).
    pub fn activations(&self, batch: &[Vec<usize>]) -> Result<Vec<Matrix>> {
        let p = self.prepare(batch)?;
        let mut x = self.embed(&p);
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let dense_view;
            let block = match &b.ffn {
                FeedForward::Dense(_) => b,
                FeedForward::Sparse(m) => {
                    let mut c = b.clone();
                    c.ffn = FeedForward::Dense(merge_experts(m)?);
                    dense_view = c;
                    &dense_view
                }
            };
            let (y, cache) = block.forward_cached(&x, p.seq_len, self.config.n_heads, Routing::TopK)?;
            if let FfnCache::Dense(h) = cache.ffn {
                out.push(h);
            }
            x = y;
        }
        Ok(out)
    }

    /// Mean next-token cross-entropy over all predicted positions, with
    /// gradients for every parameter.
    pub fn lm_loss(&self, batch: &[Vec<usize>], routing: Routing) -> Result<LossOutput> {
        let p = self.prepare(batch)?;
        let (n_heads, seq_len) = (self.config.n_heads, p.seq_len);
        let mut x = self.embed(&p);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward_cached(&x, seq_len, n_heads, routing)?;
            caches.push(cache);
            x = y;
        }
        let (xf, lnf_cache) = layernorm(&x, &self.lnf_gain, &self.lnf_bias, LN_EPS)?;
        let logits = matmul_t_unchecked(&xf, &self.lm_head);
        let (loss, d_logits) = softmax_cross_entropy(&logits, &p.targets)?;

        let d_lm_head = t_matmul_unchecked(&d_logits, &xf);
        let d_xf = matmul_unchecked(&d_logits, &self.lm_head);
        let (mut d_x, d_lnf_gain, d_lnf_bias) = layernorm_backward(&d_xf, &lnf_cache, &self.lnf_gain);

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        let mut actives = Vec::with_capacity(self.blocks.len());
        for (b, cache) in self.blocks.iter().zip(&caches).rev() {
            let (g, dx, active) = b.backward(cache, &d_x, seq_len, n_heads)?;
            block_grads.push(g);
            actives.push(active);
            d_x = dx;
        }
        block_grads.reverse();
        actives.reverse();

        let mut d_tok = Matrix::zeros(self.tok_emb.rows(), self.tok_emb.cols());
        let mut d_pos = Matrix::zeros(self.pos_emb.rows(), self.pos_emb.cols());
        for (r, &id) in p.inputs.iter().enumerate() {
            let g = d_x.row(r);
            for (o, v) in d_tok.row_mut(id).iter_mut().zip(g) {
                *o += v;
            }
            for (o, v) in d_pos.row_mut(r % seq_len).iter_mut().zip(g) {
                *o += v;
            }
        }

        let hidden = caches
            .into_iter()
            .map(|c| match c.ffn {
                FfnCache::Dense(h) => Some(h),
                FfnCache::Sparse(_) => None,
            })
            .collect();

        let grads = Gpt {
            config: self.config,
            tok_emb: d_tok,
            pos_emb: d_pos,
            blocks: block_grads,
            lnf_gain: d_lnf_gain,
            lnf_bias: d_lnf_bias,
            lm_head: d_lm_head,
        };
        let update_mask = self.update_mask(&actives);
        Ok(LossOutput {
            loss,
            grads,
            update_mask,
            hidden,
        })
    }

    fn update_mask(&self, actives: &[Vec<bool>]) -> Vec<bool> {
        let mut mask = vec![true, true];
        for (b, active) in self.blocks.iter().zip(actives) {
            mask.extend(std::iter::repeat_n(true, 12));
            match &b.ffn {
                FeedForward::Dense(_) => mask.extend([true; 4]),
                FeedForward::Sparse(m) => mask.extend(m.tensor_mask(active)),
            }
        }
        mask.extend([true; 3]);
        mask
    }
}

impl ParamSet for Gpt {
    /// Order: token embedding, position embedding; per block ln1 gain/bias,
    /// attention (Wq, bq, Wk, bk, Wv, bv, Wo, bo), ln2 gain/bias, FFN
    /// (dense: W_in, b_in, W_out, b_out; sparse: per expert W_in, b_in, W_out,
    /// then shared b_out); final norm gain/bias; output head.
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.lnf_gain, &self.lnf_bias, &self.lm_head]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.lnf_gain);
        v.push(&mut self.lnf_bias);
        v.push(&mut self.lm_head);
        v
    }
}
