//! On-the-fly token key-value store built from retrieved passages, exact
//! top-r neighbor search, and the retrieval token distribution.
//!
//! Keys are the backend's hidden states over each passage prefix; the value
//! at key position `j` is the passage token `j+1`. The store lives for one
//! request: it is rebuilt from whatever the first stage retrieved.

use crate::corpus::{MaskState, PassageStore};
use crate::error::{NestError, Result};
use crate::io;
use crate::lm::{HiddenState, LMBackend};
use crate::threads;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const KV_MAGIC: &[u8; 8] = b"NESTKV01";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvMeta {
    pub value: u32,
    pub passage_id: u32,
    /// Position of the value token within its passage.
    pub position: u32,
}

#[derive(Debug, Clone, Default)]
pub struct TokenKv {
    dim: usize,
    /// Row-major keys, one row per entry, ordered by (passage_id, position).
    keys: Vec<f64>,
    meta: Vec<KvMeta>,
    /// Maximal consecutive same-passage entry ranges `(passage_id, begin,
    /// end)`; scans use them to apply mask checks per passage instead of
    /// per entry.
    runs: Vec<(u32, usize, usize)>,
}

fn passage_runs(meta: &[KvMeta]) -> Vec<(u32, usize, usize)> {
    let mut runs: Vec<(u32, usize, usize)> = Vec::new();
    for (i, m) in meta.iter().enumerate() {
        match runs.last_mut() {
            Some((pid, _, end)) if *pid == m.passage_id && *end == i => *end = i + 1,
            _ => runs.push((m.passage_id, i, i + 1)),
        }
    }
    runs
}

/// Encode the retrieved passages into key-value entries. A passage of L
/// tokens yields L-1 entries: the hidden state over tokens[..=j] keyed to
/// the next token tokens[j+1]. Passages are processed in ascending id order
/// so the merged layout is deterministic.
pub fn build_kv(
    store: &PassageStore,
    passage_ids: &[u32],
    backend: &dyn LMBackend,
) -> Result<TokenKv> {
    let dim = backend.hidden_dim();
    let mut ids: Vec<u32> = passage_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();

    let per_passage: Vec<Result<(Vec<f64>, Vec<KvMeta>)>> = threads::pool().install(|| {
        ids.par_iter()
            .map(|&pid| {
                let passage = store.get(pid).ok_or_else(|| {
                    NestError::CorpusDesync(format!("retrieved unknown passage {pid}"))
                })?;
                let n = passage.tokens.len();
                if n < 2 {
                    return Ok((Vec::new(), Vec::new()));
                }
                let states = backend.hidden_states(&passage.tokens)?;
                let mut keys = Vec::with_capacity((n - 1) * dim);
                let mut meta = Vec::with_capacity(n - 1);
                for j in 0..n - 1 {
                    keys.extend_from_slice(&states[j]);
                    meta.push(KvMeta {
                        value: passage.tokens[j + 1],
                        passage_id: pid,
                        position: (j + 1) as u32,
                    });
                }
                Ok((keys, meta))
            })
            .collect()
    });

    let mut keys = Vec::new();
    let mut meta = Vec::new();
    for part in per_passage {
        let (k, m) = part?;
        keys.extend_from_slice(&k);
        meta.extend_from_slice(&m);
    }
    let runs = passage_runs(&meta);
    Ok(TokenKv { dim, keys, meta, runs })
}

impl TokenKv {
    pub fn from_entries(dim: usize, entries: Vec<(HiddenState, KvMeta)>) -> Result<Self> {
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut meta = Vec::with_capacity(entries.len());
        for (key, m) in entries {
            if key.len() != dim {
                return Err(NestError::DimensionMismatch { expected: dim, got: key.len() });
            }
            keys.extend_from_slice(&key);
            meta.push(m);
        }
        let runs = passage_runs(&meta);
        Ok(Self { dim, keys, meta, runs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[KvMeta] {
        &self.meta
    }

    pub fn key(&self, idx: usize) -> &[f64] {
        &self.keys[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Dump format used for test fixtures; the store itself is ephemeral.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, KV_MAGIC)?;
        io::write_u32(&mut w, self.dim as u32)?;
        io::write_u64(&mut w, self.meta.len() as u64)?;
        for (i, m) in self.meta.iter().enumerate() {
            io::write_u32(&mut w, m.passage_id)?;
            io::write_u32(&mut w, m.position)?;
            io::write_u32(&mut w, m.value)?;
            for &x in self.key(i) {
                io::write_f64(&mut w, x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, KV_MAGIC)?;
        let dim = io::read_u32(&mut r)? as usize;
        let count = io::read_u64(&mut r)? as usize;
        let mut keys = Vec::with_capacity(count * dim);
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let passage_id = io::read_u32(&mut r)?;
            let position = io::read_u32(&mut r)?;
            let value = io::read_u32(&mut r)?;
            meta.push(KvMeta { value, passage_id, position });
            for _ in 0..dim {
                keys.push(io::read_f64(&mut r)?);
            }
        }
        let runs = passage_runs(&meta);
        Ok(Self { dim, keys, meta, runs })
    }
}

/// One retrieved neighbor: similarity is the negative squared l2 distance,
/// so scores are <= 0 and an exact key match scores 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub score: f64,
    pub value: u32,
    pub passage_id: u32,
    pub position: u32,
}

/// Neighbors sorted by descending score; ties break by ascending
/// (passage_id, position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet {
    neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn new(mut neighbors: Vec<Neighbor>) -> Self {
        neighbors.sort_by(neighbor_order);
        Self { neighbors }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn neighbors(&self) -> &[Neighbor] {
        &self.neighbors
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter()
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| (a.passage_id, a.position).cmp(&(b.passage_id, b.position)))
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn candidate_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

/// Select the top `r` of `scored` in place and convert to neighbors.
/// Entry index order coincides with (passage_id, position) order inside a
/// run, so the index tie-break realizes the coordinate tie-break.
fn top_r(kv: &TokenKv, mut scored: Vec<(f64, usize)>, r: usize) -> NeighborSet {
    if scored.len() > r {
        scored.select_nth_unstable_by(r - 1, candidate_order);
        scored.truncate(r);
    }
    scored.sort_by(candidate_order);
    let neighbors = scored
        .into_iter()
        .map(|(score, idx)| {
            let m = kv.meta[idx];
            Neighbor { score, value: m.value, passage_id: m.passage_id, position: m.position }
        })
        .collect();
    NeighborSet { neighbors }
}

fn scan_one(kv: &TokenKv, query: &[f64], r: usize, mask: &MaskState) -> NeighborSet {
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(kv.len());
    for &(pid, begin, end) in &kv.runs {
        if mask.passage_touched(pid) {
            for idx in begin..end {
                let m = &kv.meta[idx];
                if mask.is_masked(m.passage_id, m.position) {
                    continue;
                }
                scored.push((-squared_l2(kv.key(idx), query), idx));
            }
        } else {
            for idx in begin..end {
                scored.push((-squared_l2(kv.key(idx), query), idx));
            }
        }
    }
    top_r(kv, scored, r)
}

/// Batched scan: one pass over the key matrix computes every query's
/// distance column, so keys are streamed from memory once per batch instead
/// of once per query. The arithmetic is identical to the single scan; the
/// results must match it bit for bit.
fn scan_many(kv: &TokenKv, queries: &[HiddenState], r: usize, mask: &MaskState) -> Vec<NeighborSet> {
    let entries = kv.len();
    let q = queries.len();
    let mut excluded = vec![false; entries];
    let mut any_excluded = false;
    for &(pid, begin, end) in &kv.runs {
        if mask.passage_touched(pid) {
            for idx in begin..end {
                let m = &kv.meta[idx];
                if mask.is_masked(m.passage_id, m.position) {
                    excluded[idx] = true;
                    any_excluded = true;
                }
            }
        }
    }

    // distances[qi * entries + idx]: per-query columns stay contiguous for
    // the selection pass; the key row is hot in cache across all queries.
    let mut distances = vec![0.0f64; q * entries];
    for idx in 0..entries {
        if excluded[idx] {
            continue;
        }
        let key = kv.key(idx);
        for (qi, query) in queries.iter().enumerate() {
            distances[qi * entries + idx] = -squared_l2(key, query);
        }
    }

    let mut out = Vec::with_capacity(q);
    for qi in 0..q {
        let column = &distances[qi * entries..(qi + 1) * entries];
        let scored: Vec<(f64, usize)> = if any_excluded {
            column
                .iter()
                .enumerate()
                .filter(|&(idx, _)| !excluded[idx])
                .map(|(idx, &s)| (s, idx))
                .collect()
        } else {
            column.iter().enumerate().map(|(idx, &s)| (s, idx)).collect()
        };
        out.push(top_r(kv, scored, r));
    }
    out
}

/// Exact top-r scan for a single query. Masked entries are filtered at
/// search time so the shared store never has to change mid-generation.
pub fn knn_search(
    kv: &TokenKv,
    query: &HiddenState,
    r: usize,
    mask: &MaskState,
) -> Result<NeighborSet> {
    if r == 0 || kv.is_empty() {
        return Ok(NeighborSet::empty());
    }
    if query.len() != kv.dim {
        return Err(NestError::DimensionMismatch { expected: kv.dim, got: query.len() });
    }
    Ok(scan_one(kv, query, r, mask))
}

/// Exact top-r scan for a batch of queries in one pass over the keys.
/// Results are position-aligned with the input and equal what per-query
/// `knn_search` calls would return.
pub fn knn_search_batch(
    kv: &TokenKv,
    queries: &[HiddenState],
    r: usize,
    mask: &MaskState,
) -> Result<Vec<NeighborSet>> {
    if r == 0 || kv.is_empty() {
        return Ok(vec![NeighborSet::empty(); queries.len()]);
    }
    for q in queries {
        if q.len() != kv.dim {
            return Err(NestError::DimensionMismatch { expected: kv.dim, got: q.len() });
        }
    }
    match queries.len() {
        0 => Ok(Vec::new()),
        1 => Ok(vec![scan_one(kv, &queries[0], r, mask)]),
        _ => Ok(scan_many(kv, queries, r, mask)),
    }
}

/// Sparse next-token distribution from retrieved neighbors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnnDistribution {
    probs: BTreeMap<u32, f64>,
}

impl KnnDistribution {
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.probs.get(&token).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.probs.iter().map(|(&t, &p)| (t, p))
    }

    pub fn sum(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn support(&self) -> impl Iterator<Item = u32> + '_ {
        self.probs.keys().copied()
    }
}

/// Softmax of `mu * score` pooled by token value. Computed in a max-shifted
/// form; probabilities over a non-empty neighbor set sum to 1.
pub fn knn_distribution(neighbors: &NeighborSet, mu: f64) -> Result<KnnDistribution> {
    if mu <= 0.0 {
        return Err(NestError::config("mu", "inverse temperature must be > 0"));
    }
    if neighbors.is_empty() {
        return Ok(KnnDistribution::default());
    }
    let max_score = neighbors
        .iter()
        .map(|n| n.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: BTreeMap<u32, f64> = BTreeMap::new();
    let mut total = 0.0;
    for n in neighbors.iter() {
        let w = (mu * (n.score - max_score)).exp();
        *probs.entry(n.value).or_insert(0.0) += w;
        total += w;
    }
    for p in probs.values_mut() {
        *p /= total;
    }
    Ok(KnnDistribution { probs })
}
