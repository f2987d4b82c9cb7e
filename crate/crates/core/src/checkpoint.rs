//! Bit-exact binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SSD1"  u32 version
//! config  6 x u32: n_layers d_model n_heads d_ff vocab_size max_seq_len
//! u64 step  u64 seed  rng: u64 seed, u64 stream, u128 word position
//! u64 cumulative training FLOPs
//! model   tensors (see below)
//! u8 has_adam  [f64 beta1 beta2 eps, u64 step, first moment, second moment]
//! u8 has_scheduler  [scheduler state]
//! u32 len + UTF-8 metadata (the training configuration as JSON)
//! ```
//!
//! A tensor is `u32 rows, u32 cols, rows*cols f64` row-major. Model tensors
//! come in this order: token embedding, position embedding, then per block
//! ln1 gain, ln1 bias, Wq, bq, Wk, bk, Wv, bv, Wo, bo, ln2 gain, ln2 bias and
//! the FFN, then final norm gain, final norm bias, output head. A dense FFN is
//! `u8 0` followed by W_in, b_in, W_out, b_out. A sparse FFN is `u8 1`,
//! `u32 N, u32 K`, `d_ff x u32` expert assignment, then W_in, b_in, W_out of
//! each expert and the shared b_out. Optimizer moments use the model layout.
//!
//! Scheduler state: `u8 phase, u64 steps_in_phase, u64 last_dense_len,
//! u64 sparse_budget`, per layer `u8 has_partition [u32 N, d_ff x u32]`,
//! `u32 n_events`, each `u64 step, u8 from, u8 to, u8 has_similarity, f64`.

use std::fs;
use std::path::Path;

use crate::clustering::Partition;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Attention, Block, FeedForward, FfnWeights, Gpt, ModelConfig};
use crate::moe::{Expert, SmoeFfn};
use crate::numerics::{AdamConfig, AdamState, Matrix, RngSnapshot};
use crate::scheduler::{Phase, SchedulerState, TransitionEvent};

pub const MAGIC: [u8; 4] = *b"SSD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Gpt,
    /// Number of completed training steps.
    pub step: u64,
    pub seed: u64,
    pub rng: RngSnapshot,
    pub flops: u64,
    pub adam: Option<AdamState<Gpt>>,
    pub scheduler: Option<SchedulerState>,
    pub metadata: String,
}

impl Checkpoint {
    /// A bare model checkpoint with no training state.
    pub fn from_model(model: Gpt, seed: u64) -> Self {
        Self {
            model,
            step: 0,
            seed,
            rng: crate::numerics::RngState::new(seed).snapshot(),
            flops: 0,
            adam: None,
            scheduler: None,
            metadata: String::new(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        for &v in m.as_slice() {
            self.f64(v);
        }
    }
    fn partition(&mut self, p: &Partition) {
        self.u32(p.n_clusters());
        for &a in p.assignment() {
            self.u32(a);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(malformed(format!("flag byte {b}"))),
        }
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let (r, c) = (self.u32()?, self.u32()?);
        if (r, c) != (rows, cols) {
            return Err(malformed(format!("tensor {r}x{c}, expected {rows}x{cols}")));
        }
        let bytes = self.take(r * c * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(r, c, data)
    }
    fn partition(&mut self, len: usize) -> Result<Partition> {
        let n = self.u32()?;
        let assignment = (0..len).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        Partition::new(assignment, n).map_err(|e| malformed(e.to_string()))
    }
}

fn write_ffn(w: &mut Writer, ffn: &FeedForward) {
    match ffn {
        FeedForward::Dense(f) => {
            w.u8(0);
            for t in [&f.w_in, &f.b_in, &f.w_out, &f.b_out] {
                w.tensor(t);
            }
        }
        FeedForward::Sparse(m) => {
            w.u8(1);
            w.u32(m.n_experts());
            w.u32(m.top_k());
            for &a in m.partition().assignment() {
                w.u32(a);
            }
            for e in m.experts() {
                w.tensor(&e.w_in);
                w.tensor(&e.b_in);
                w.tensor(&e.w_out);
            }
            w.tensor(m.b_out());
        }
    }
}

fn read_ffn(r: &mut Reader, cfg: &ModelConfig) -> Result<FeedForward> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    match r.u8()? {
        0 => Ok(FeedForward::Dense(FfnWeights {
            w_in: r.tensor(f, d)?,
            b_in: r.tensor(1, f)?,
            w_out: r.tensor(d, f)?,
            b_out: r.tensor(1, d)?,
        })),
        1 => {
            let n = r.u32()?;
            let k = r.u32()?;
            if n == 0 || f % n != 0 {
                return Err(malformed(format!("{n} experts over {f} neurons")));
            }
            let assignment = (0..f).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let partition = Partition::new(assignment, n).map_err(|e| malformed(e.to_string()))?;
            let size = f / n;
            let experts = (0..n)
                .map(|_| {
                    Ok(Expert {
                        w_in: r.tensor(size, d)?,
                        b_in: r.tensor(1, size)?,
                        w_out: r.tensor(d, size)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let b_out = r.tensor(1, d)?;
            let row_order = partition.members();
            let m =
                SmoeFfn::from_parts(experts, b_out, k, partition, row_order).map_err(|e| malformed(e.to_string()))?;
            Ok(FeedForward::Sparse(m))
        }
        b => Err(malformed(format!("FFN kind {b}"))),
    }
}

fn write_gpt(w: &mut Writer, m: &Gpt) {
    w.tensor(&m.tok_emb);
    w.tensor(&m.pos_emb);
    for b in &m.blocks {
        w.tensor(&b.ln1_gain);
        w.tensor(&b.ln1_bias);
        for t in [
            &b.attn.w_q,
            &b.attn.b_q,
            &b.attn.w_k,
            &b.attn.b_k,
            &b.attn.w_v,
            &b.attn.b_v,
            &b.attn.w_o,
            &b.attn.b_o,
        ] {
            w.tensor(t);
        }
        w.tensor(&b.ln2_gain);
        w.tensor(&b.ln2_bias);
        write_ffn(w, &b.ffn);
    }
    w.tensor(&m.lnf_gain);
    w.tensor(&m.lnf_bias);
    w.tensor(&m.lm_head);
}

fn read_gpt(r: &mut Reader, cfg: ModelConfig) -> Result<Gpt> {
    let d = cfg.d_model;
    let tok_emb = r.tensor(cfg.vocab_size, d)?;
    let pos_emb = r.tensor(cfg.max_seq_len, d)?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let ln1_gain = r.tensor(1, d)?;
        let ln1_bias = r.tensor(1, d)?;
        let attn = Attention {
            w_q: r.tensor(d, d)?,
            b_q: r.tensor(1, d)?,
            w_k: r.tensor(d, d)?,
            b_k: r.tensor(1, d)?,
            w_v: r.tensor(d, d)?,
            b_v: r.tensor(1, d)?,
            w_o: r.tensor(d, d)?,
            b_o: r.tensor(1, d)?,
        };
        let ln2_gain = r.tensor(1, d)?;
        let ln2_bias = r.tensor(1, d)?;
        let ffn = read_ffn(r, &cfg)?;
        blocks.push(Block {
            ln1_gain,
            ln1_bias,
            attn,
            ln2_gain,
            ln2_bias,
            ffn,
        });
    }
    Ok(Gpt {
        config: cfg,
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: r.tensor(1, d)?,
        lnf_bias: r.tensor(1, d)?,
        lm_head: r.tensor(cfg.vocab_size, d)?,
    })
}

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Dense => 0,
        Phase::Sparse => 1,
        Phase::FinalDense => 2,
    }
}

fn phase_from(b: u8) -> Result<Phase> {
    match b {
        0 => Ok(Phase::Dense),
        1 => Ok(Phase::Sparse),
        2 => Ok(Phase::FinalDense),
        _ => Err(malformed(format!("phase byte {b}"))),
    }
}

fn write_scheduler(w: &mut Writer, s: &SchedulerState) {
    w.u8(phase_code(s.phase));
    w.u64(s.steps_in_phase);
    w.u64(s.last_dense_len);
    w.u64(s.sparse_budget);
    for p in &s.prev_partitions {
        match p {
            Some(p) => {
                w.u8(1);
                w.partition(p);
            }
            None => w.u8(0),
        }
    }
    w.u32(s.events.len());
    for e in &s.events {
        w.u64(e.step);
        w.u8(phase_code(e.from));
        w.u8(phase_code(e.to));
        w.u8(e.similarity.is_some() as u8);
        w.f64(e.similarity.unwrap_or(0.0));
    }
}

fn read_scheduler(r: &mut Reader, cfg: &ModelConfig) -> Result<SchedulerState> {
    let mut s = SchedulerState::new(cfg.n_layers);
    s.phase = phase_from(r.u8()?)?;
    s.steps_in_phase = r.u64()?;
    s.last_dense_len = r.u64()?;
    s.sparse_budget = r.u64()?;
    for slot in s.prev_partitions.iter_mut() {
        if r.flag()? {
            *slot = Some(r.partition(cfg.d_ff)?);
        }
    }
    let n = r.u32()?;
    for _ in 0..n {
        let step = r.u64()?;
        let from = phase_from(r.u8()?)?;
        let to = phase_from(r.u8()?)?;
        let has = r.flag()?;
        let v = r.f64()?;
        s.events.push(TransitionEvent {
            step,
            from,
            to,
            similarity: has.then_some(v),
        });
    }
    Ok(s)
}

pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &c.model.config;
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_seq_len,
    ] {
        w.u32(v);
    }
    w.u64(c.step);
    w.u64(c.seed);
    w.u64(c.rng.seed);
    w.u64(c.rng.stream);
    w.0.extend_from_slice(&c.rng.word_pos.to_le_bytes());
    w.u64(c.flops);
    write_gpt(&mut w, &c.model);
    match &c.adam {
        Some(a) => {
            w.u8(1);
            w.f64(a.config.beta1);
            w.f64(a.config.beta2);
            w.f64(a.config.eps);
            w.u64(a.step);
            write_gpt(&mut w, &a.first_moment);
            write_gpt(&mut w, &a.second_moment);
        }
        None => w.u8(0),
    }
    match &c.scheduler {
        Some(s) => {
            w.u8(1);
            write_scheduler(&mut w, s);
        }
        None => w.u8(0),
    }
    w.u32(c.metadata.len());
    w.0.extend_from_slice(c.metadata.as_bytes());
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let config = ModelConfig {
        n_layers: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        d_ff: r.u32()?,
        vocab_size: r.u32()?,
        max_seq_len: r.u32()?,
    };
    config.validate().map_err(|e| malformed(e.to_string()))?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let rng = RngSnapshot {
        seed: r.u64()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    };
    let flops = r.u64()?;
    let model = read_gpt(&mut r, config)?;
    let adam = if r.flag()? {
        let cfg = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let first_moment = read_gpt(&mut r, config)?;
        let second_moment = read_gpt(&mut r, config)?;
        Some(AdamState {
            config: cfg,
            step,
            first_moment,
            second_moment,
        })
    } else {
        None
    };
    let scheduler = if r.flag()? {
        Some(read_scheduler(&mut r, &config)?)
    } else {
        None
    };
    let len = r.u32()?;
    let metadata = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| malformed(e.to_string()))?;
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos).into());
    }
    Ok(Checkpoint {
        model,
        step,
        seed,
        rng,
        flops,
        adam,
        scheduler,
        metadata,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(c))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
