use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// End-of-text id of the byte tokenizer.
pub const EOT: usize = 256;
pub const BYTE_VOCAB: usize = 257;

/// Byte-level tokenizer, optionally extended with multi-byte tokens.
///
/// Ids `0..256` are raw bytes, extra tokens follow in file order, and the
/// end-of-text marker is the last id. Encoding is greedy longest match with
/// single bytes as fallback, so every input is encodable.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    extra: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    max_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::bytes()
    }
}

impl Tokenizer {
    pub fn bytes() -> Self {
        Self {
            extra: Vec::new(),
            lookup: HashMap::new(),
            max_len: 1,
        }
    }

    /// One token per line; `\n`, `\t` and `\\` escapes are honored. Blank
    /// lines, single bytes and duplicates are skipped.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut t = Self::bytes();
        for line in text.lines() {
            let tok = unescape(line).into_bytes();
            if tok.len() < 2 || t.lookup.contains_key(&tok) {
                continue;
            }
            t.max_len = t.max_len.max(tok.len());
            t.lookup.insert(tok.clone(), 256 + t.extra.len());
            t.extra.push(tok);
        }
        Ok(t)
    }

    pub fn vocab_size(&self) -> usize {
        257 + self.extra.len()
    }

    pub fn eot(&self) -> usize {
        256 + self.extra.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_len.min(bytes.len() - i);
            let hit = (2..=longest)
                .rev()
                .find_map(|n| self.lookup.get(&bytes[i..i + n]).map(|&id| (id, n)));
            let (id, n) = hit.unwrap_or((bytes[i] as usize, 1));
            out.push(id);
            i += n;
        }
        out
    }

    /// Inverse of [`Tokenizer::encode`]; end-of-text markers decode to nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some(tok) = self.extra.get(id - 256) {
                bytes.extend_from_slice(tok);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// Extra multi-byte tokens; plain bytes when absent.
    pub vocab_path: Option<PathBuf>,
    /// Fraction of documents (taken from the end) held out for validation.
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            vocab_path: None,
            val_fraction: 0.1,
        }
    }
}

/// Where the split falls, recorded so a run can be replayed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub n_documents: usize,
    pub train_documents: usize,
    pub val_documents: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub vocab_size: usize,
    /// FNV-1a hash of the raw corpus bytes.
    pub content_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub manifest: SplitManifest,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Documents are separated by blank lines.
pub fn split_documents(text: &str) -> Vec<&str> {
    let mut docs = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                docs.push(&text[s..end]);
            }
        } else {
            start.get_or_insert(offset);
            end = offset + line.trim_end_matches(['\n', '\r']).len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        docs.push(&text[s..end]);
    }
    docs
}

impl Corpus {
    pub fn load(cfg: &CorpusConfig) -> Result<Self> {
        let text = fs::read_to_string(&cfg.path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", cfg.path.display())))?;
        let tokenizer = match &cfg.vocab_path {
            Some(p) => Tokenizer::from_vocab_file(p)?,
            None => Tokenizer::bytes(),
        };
        Self::from_text(&text, tokenizer, cfg.val_fraction)
    }

    /// Tokenizes every document followed by end-of-text; the last
    /// `ceil(val_fraction · documents)` documents (at least one) form the
    /// validation stream.
    pub fn from_text(text: &str, tokenizer: Tokenizer, val_fraction: f64) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Corpus(format!(
                "validation fraction must be in (0, 1), got {val_fraction}"
            )));
        }
        let docs = split_documents(text);
        if docs.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        if docs.len() < 2 {
            return Err(Error::Corpus(
                "need at least two blank-line separated documents to hold one out".into(),
            ));
        }
        let n_val =
            (crate::numerics::ceil_tolerant(val_fraction * docs.len() as f64) as usize).clamp(1, docs.len() - 1);
        let n_train = docs.len() - n_val;
        let encode = |ds: &[&str]| {
            let mut out = Vec::new();
            for d in ds {
                out.extend(tokenizer.encode(d));
                out.push(tokenizer.eot());
            }
            out
        };
        let train = encode(&docs[..n_train]);
        let val = encode(&docs[n_train..]);
        let manifest = SplitManifest {
            n_documents: docs.len(),
            train_documents: n_train,
            val_documents: n_val,
            train_tokens: train.len(),
            val_tokens: val.len(),
            vocab_size: tokenizer.vocab_size(),
            content_hash: fnv1a(text.as_bytes()),
        };
        Ok(Self {
            tokenizer,
            train,
            val,
            manifest,
        })
    }
}

/// `batch_size` windows of `seq_len + 1` tokens at uniformly random offsets.
pub fn sample_batch(
    tokens: &[usize],
    batch_size: usize,
    seq_len: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<usize>>> {
    let window = seq_len + 1;
    if tokens.len() < window {
        return Err(Error::Corpus(format!(
            "training stream has {} tokens, need at least {window}",
            tokens.len()
        )));
    }
    let span = tokens.len() - window + 1;
    Ok((0..batch_size)
        .map(|_| {
            let start = rng.below(span);
            tokens[start..start + window].to_vec()
        })
        .collect())
}

/// Up to `count` consecutive windows of `seq_len + 1` tokens, stride `seq_len`.
pub fn validation_windows(tokens: &[usize], count: usize, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if tokens.len() < seq_len + 1 {
        return Err(Error::Corpus(format!(
            "validation stream has {} tokens, need at least {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    Ok((0..count)
        .map(|i| i * seq_len)
        .take_while(|&s| s + seq_len < tokens.len())
        .map(|s| tokens[s..s + seq_len + 1].to_vec())
        .collect())
}

/// A highly repetitive English-like text of about `n_bytes` bytes, split
/// into paragraphs. Useful for checking that training makes progress.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    const SUBJECTS: [&str; 6] = ["the cat", "a dog", "the bird", "my friend", "the teacher", "a child"];
    const VERBS: [&str; 5] = ["sees", "likes", "finds", "follows", "helps"];
    const OBJECTS: [&str; 6] = ["the ball", "a tree", "the house", "some bread", "the river", "a book"];
    const ENDINGS: [&str; 4] = [" today.", " again.", " in the morning.", "."];
    let mut rng = RngState::new(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    let mut in_paragraph = 0;
    while out.len() < n_bytes {
        let s = format!(
            "{} {} {}{}",
            SUBJECTS[rng.below(SUBJECTS.len())],
            VERBS[rng.below(VERBS.len())],
            OBJECTS[rng.below(OBJECTS.len())],
            ENDINGS[rng.below(ENDINGS.len())]
        );
        out.push_str(&s);
        in_paragraph += 1;
        if in_paragraph == 8 {
            out.push_str("\n\n");
            in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out
}
