//! Exact-scan dense index over hashed bag-of-words embeddings.

use super::{take_top_k, ScoredList};
use crate::corpus::PassageStore;
use crate::error::{NestError, Result};
use crate::io;
use crate::threads;
use crate::tokenizer;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const DENSE_MAGIC: &[u8; 8] = b"NESTDNS1";

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_EMBED_SEED: u64 = 0x5e5e_0002;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Signed feature-hashing embedder. The embedding depends only on the token
/// multiset, so queries and passages embed identically regardless of order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for Embedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM, seed: DEFAULT_EMBED_SEED }
    }
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// Embed a token sequence as an l2-normalized vector. Special ids are
    /// filtered; if nothing remains (or all buckets cancel) a fixed unit
    /// basis vector stands in for the zero vector.
    pub fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dim];
        for &t in tokens {
            if tokenizer::is_special(t) {
                continue;
            }
            let h = splitmix64(self.seed ^ u64::from(t).wrapping_mul(0xff51_afd7_ed55_8ccd));
            let bucket = (h >> 1) as usize % self.dim;
            let sign = if h & 1 == 1 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        v
    }
}

/// One l2-normalized vector per passage; searched by exact inner-product scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    /// Row-major, one row per passage id.
    vectors: Vec<f64>,
}

impl DenseIndex {
    pub fn build(store: &PassageStore, embedder: &Embedder) -> Self {
        let dim = embedder.dim;
        let rows: Vec<Vec<f64>> = threads::pool().install(|| {
            store
                .passages()
                .par_iter()
                .map(|p| embedder.embed(&p.tokens))
                .collect()
        });
        let mut vectors = Vec::with_capacity(dim * rows.len());
        for row in rows {
            vectors.extend_from_slice(&row);
        }
        Self { dim, vectors }
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut vectors = Vec::with_capacity(dim * rows.len());
        for row in rows {
            if row.len() != dim {
                return Err(NestError::DimensionMismatch { expected: dim, got: row.len() });
            }
            vectors.extend_from_slice(&row);
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.vectors.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, passage_id: u32) -> Option<&[f64]> {
        let start = passage_id as usize * self.dim;
        self.vectors.get(start..start + self.dim)
    }

    /// Top-k passages by inner product over the full store. The scan is
    /// exact; every row is scored.
    pub fn search(&self, query: &[f64], k: usize) -> Result<ScoredList> {
        if query.len() != self.dim {
            return Err(NestError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let scored: Vec<(u32, f64)> = threads::pool().install(|| {
            self.vectors
                .par_chunks(self.dim)
                .enumerate()
                .map(|(i, row)| {
                    let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                    (i as u32, dot)
                })
                .collect()
        });
        Ok(take_top_k(scored, k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, DENSE_MAGIC)?;
        io::write_u32(&mut w, self.dim as u32)?;
        io::write_u32(&mut w, self.len() as u32)?;
        for &x in &self.vectors {
            io::write_f32(&mut w, x as f32)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load and re-normalize rows in f64; the file stores f32, which loses
    /// enough precision to matter for exact-match score checks.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, DENSE_MAGIC)?;
        let dim = io::read_u32(&mut r)? as usize;
        let count = io::read_u32(&mut r)? as usize;
        let mut vectors = Vec::with_capacity(dim * count);
        for _ in 0..dim * count {
            vectors.push(f64::from(io::read_f32(&mut r)?));
        }
        for row in vectors.chunks_mut(dim.max(1)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row {
                    *x /= norm;
                }
            }
        }
        Ok(Self { dim, vectors })
    }
}
