//! Language-model backend interface and a deterministic bigram reference
//! backend.
//!
//! The backend contract is a next-token distribution plus a hidden-state
//! mapping of the context; everything downstream (token retrieval,
//! interpolation, draft evaluation) is written against the trait so any
//! model exposing these two signals can be plugged in.

use crate::error::{NestError, Result};
use crate::io;
use crate::tokenizer;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const LM_MAGIC: &[u8; 8] = b"NESTLM01";

pub type HiddenState = Vec<f64>;

/// A normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| *p >= 0.0 && p.is_finite()));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self { probs }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self::new(vec![1.0 / vocab as f64; vocab])
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Highest-probability token; ties break toward the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

/// Next-token model plus hidden-state encoder.
///
/// Implementations must be deterministic: the same context always yields the
/// same distribution and hidden state.
pub trait LMBackend: Send + Sync {
    fn vocab_size(&self) -> u32;
    fn hidden_dim(&self) -> usize;

    /// Distribution over the next token and the hidden state at the final
    /// position of `context`. The context must be non-empty.
    fn forward(&self, context: &[u32]) -> Result<(TokenDistribution, HiddenState)>;

    /// Per-position `(distribution, hidden state)` pairs: element `j` equals
    /// `forward(&context[..j+1])`.
    fn forward_all(&self, context: &[u32]) -> Result<Vec<(TokenDistribution, HiddenState)>>;

    /// Hidden states only, one per position. Cheaper than `forward_all` for
    /// backends where the distribution is the expensive part.
    fn hidden_states(&self, context: &[u32]) -> Result<Vec<HiddenState>> {
        Ok(self
            .forward_all(context)?
            .into_iter()
            .map(|(_, h)| h)
            .collect())
    }

    /// Batched results for the last `tail` positions of `context`: element
    /// `i` equals `forward(&context[..len - tail + i + 1])`. One call covers
    /// a whole draft, so per-call costs amortize across its tokens.
    fn forward_tail(
        &self,
        context: &[u32],
        tail: usize,
    ) -> Result<Vec<(TokenDistribution, HiddenState)>> {
        if tail > context.len() {
            return Err(NestError::config("tail", "longer than context"));
        }
        (context.len() - tail..context.len())
            .map(|j| self.forward(&context[..=j]))
            .collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Add-one-smoothed bigram model with a suffix-hash hidden state.
///
/// The hidden state is a pure function of the last `suffix_window` tokens:
/// each token hashes to a sign vector in `{-1,+1}^d`, the signs are summed
/// with geometric position weights (most recent token weighted 1), and the
/// result is l2-normalized. Identical suffixes therefore map to identical
/// states, which is exactly the property token retrieval keys on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyLm {
    vocab_size: u32,
    epsilon: f64,
    suffix_window: usize,
    hidden_dim: usize,
    hash_seed: u64,
    rows: HashMap<u32, BigramRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BigramRow {
    total: u64,
    /// Sorted by successor token id.
    counts: Vec<(u32, u64)>,
}

#[derive(Debug, Clone)]
pub struct ToyLmConfig {
    pub epsilon: f64,
    pub suffix_window: usize,
    pub hidden_dim: usize,
    pub hash_seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            suffix_window: 4,
            hidden_dim: 64,
            hash_seed: 0x5e5e_0001,
        }
    }
}

impl ToyLm {
    /// Count bigrams over documents' token streams. Each stream is wrapped in
    /// BOS/EOS before counting.
    pub fn train(doc_tokens: &[Vec<u32>], vocab_size: u32, config: &ToyLmConfig) -> Result<Self> {
        if config.epsilon <= 0.0 {
            return Err(NestError::config("smoothing", "epsilon must be > 0"));
        }
        if config.suffix_window == 0 {
            return Err(NestError::config("suffix-window", "must be >= 1"));
        }
        if config.hidden_dim == 0 {
            return Err(NestError::config("hidden-dim", "must be >= 1"));
        }
        let mut rows: HashMap<u32, BigramRow> = HashMap::new();
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for tokens in doc_tokens {
            if tokens.is_empty() {
                continue;
            }
            let mut prev = tokenizer::BOS;
            for &t in tokens {
                if t >= vocab_size {
                    return Err(NestError::TokenOutOfRange { token: t, vocab: vocab_size });
                }
                *counts.entry((prev, t)).or_insert(0) += 1;
                prev = t;
            }
            *counts.entry((prev, tokenizer::EOS)).or_insert(0) += 1;
        }
        for ((ctx, next), c) in counts {
            let row = rows.entry(ctx).or_insert_with(|| BigramRow {
                total: 0,
                counts: Vec::new(),
            });
            row.total += c;
            row.counts.push((next, c));
        }
        for row in rows.values_mut() {
            row.counts.sort_by_key(|&(next, _)| next);
        }
        Ok(Self {
            vocab_size,
            epsilon: config.epsilon,
            suffix_window: config.suffix_window,
            hidden_dim: config.hidden_dim,
            hash_seed: config.hash_seed,
            rows,
        })
    }

    pub fn bigram_count(&self, context: u32, next: u32) -> u64 {
        self.rows
            .get(&context)
            .and_then(|row| {
                row.counts
                    .binary_search_by_key(&next, |&(n, _)| n)
                    .ok()
                    .map(|i| row.counts[i].1)
            })
            .unwrap_or(0)
    }

    pub fn context_count(&self, context: u32) -> u64 {
        self.rows.get(&context).map(|r| r.total).unwrap_or(0)
    }

    fn distribution_after(&self, last: u32) -> TokenDistribution {
        let v = self.vocab_size as usize;
        let total = self.context_count(last) as f64;
        let denom = total + self.epsilon * v as f64;
        let base = self.epsilon / denom;
        let mut probs = vec![base; v];
        if let Some(row) = self.rows.get(&last) {
            for &(next, c) in &row.counts {
                probs[next as usize] = (c as f64 + self.epsilon) / denom;
            }
        }
        TokenDistribution::new(probs)
    }

    /// Sign vector for one token, derived from the seeded hash. 64 dims are
    /// drawn per hash word.
    fn token_signs(&self, token: u32, out: &mut [f64], weight: f64) {
        let words = (self.hidden_dim + 63) / 64;
        for w in 0..words {
            let bits = splitmix64(
                self.hash_seed
                    ^ (u64::from(token).wrapping_mul(0x9e37_79b9_7f4a_7c15))
                    ^ ((w as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)),
            );
            for b in 0..64 {
                let dim = w * 64 + b;
                if dim >= self.hidden_dim {
                    break;
                }
                let sign = if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 };
                out[dim] += weight * sign;
            }
        }
    }

    fn hidden_after(&self, context: &[u32]) -> HiddenState {
        let mut state = vec![0.0; self.hidden_dim];
        let mut weight = 1.0;
        for &t in context.iter().rev().take(self.suffix_window) {
            self.token_signs(t, &mut state, weight);
            weight *= 0.5;
        }
        let norm = state.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut state {
                *x /= norm;
            }
        } else {
            state[0] = 1.0;
        }
        state
    }

    fn check_context(&self, context: &[u32]) -> Result<()> {
        if context.is_empty() {
            return Err(NestError::config("context", "must be non-empty"));
        }
        for &t in context {
            if t >= self.vocab_size {
                return Err(NestError::TokenOutOfRange { token: t, vocab: self.vocab_size });
            }
        }
        Ok(())
    }

    pub fn save(&self, vocab: &[String], path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, LM_MAGIC)?;
        io::write_u32(&mut w, vocab.len() as u32)?;
        for word in vocab {
            io::write_string(&mut w, word)?;
        }
        io::write_f64(&mut w, self.epsilon)?;
        io::write_u32(&mut w, self.suffix_window as u32)?;
        io::write_u32(&mut w, self.hidden_dim as u32)?;
        io::write_u64(&mut w, self.hash_seed)?;
        io::write_u32(&mut w, self.vocab_size)?;
        let mut ctxs: Vec<u32> = self.rows.keys().copied().collect();
        ctxs.sort_unstable();
        io::write_u32(&mut w, ctxs.len() as u32)?;
        for ctx in ctxs {
            let row = &self.rows[&ctx];
            io::write_u32(&mut w, ctx)?;
            io::write_u64(&mut w, row.total)?;
            io::write_u32(&mut w, row.counts.len() as u32)?;
            for &(next, c) in &row.counts {
                io::write_u32(&mut w, next)?;
                io::write_u64(&mut w, c)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load the model together with the vocabulary words stored alongside it.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, LM_MAGIC)?;
        let word_count = io::read_u32(&mut r)? as usize;
        let mut vocab = Vec::with_capacity(word_count);
        for _ in 0..word_count {
            vocab.push(io::read_string(&mut r)?);
        }
        let epsilon = io::read_f64(&mut r)?;
        let suffix_window = io::read_u32(&mut r)? as usize;
        let hidden_dim = io::read_u32(&mut r)? as usize;
        let hash_seed = io::read_u64(&mut r)?;
        let vocab_size = io::read_u32(&mut r)?;
        let row_count = io::read_u32(&mut r)? as usize;
        let mut rows = HashMap::with_capacity(row_count);
        for _ in 0..row_count {
            let ctx = io::read_u32(&mut r)?;
            let total = io::read_u64(&mut r)?;
            let entries = io::read_u32(&mut r)? as usize;
            let mut counts = Vec::with_capacity(entries);
            for _ in 0..entries {
                let next = io::read_u32(&mut r)?;
                let c = io::read_u64(&mut r)?;
                counts.push((next, c));
            }
            rows.insert(ctx, BigramRow { total, counts });
        }
        Ok((
            Self {
                vocab_size,
                epsilon,
                suffix_window,
                hidden_dim,
                hash_seed,
                rows,
            },
            vocab,
        ))
    }
}

impl LMBackend for ToyLm {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn forward(&self, context: &[u32]) -> Result<(TokenDistribution, HiddenState)> {
        self.check_context(context)?;
        let last = *context.last().expect("non-empty");
        Ok((self.distribution_after(last), self.hidden_after(context)))
    }

    fn forward_all(&self, context: &[u32]) -> Result<Vec<(TokenDistribution, HiddenState)>> {
        self.check_context(context)?;
        let mut out = Vec::with_capacity(context.len());
        for j in 0..context.len() {
            let prefix = &context[..=j];
            out.push((
                self.distribution_after(context[j]),
                self.hidden_after(prefix),
            ));
        }
        Ok(out)
    }

    fn hidden_states(&self, context: &[u32]) -> Result<Vec<HiddenState>> {
        self.check_context(context)?;
        Ok((0..context.len())
            .map(|j| self.hidden_after(&context[..=j]))
            .collect())
    }

    fn forward_tail(
        &self,
        context: &[u32],
        tail: usize,
    ) -> Result<Vec<(TokenDistribution, HiddenState)>> {
        if tail > context.len() {
            return Err(NestError::config("tail", "longer than context"));
        }
        // Validate once instead of per position.
        self.check_context(context)?;
        Ok((context.len() - tail..context.len())
            .map(|j| {
                (
                    self.distribution_after(context[j]),
                    self.hidden_after(&context[..=j]),
                )
            })
            .collect())
    }
}
