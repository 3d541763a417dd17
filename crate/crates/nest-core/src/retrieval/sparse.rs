//! BM25 inverted index over passage token ids.

use super::{take_top_k, ScoredList};
use crate::corpus::PassageStore;
use crate::error::{NestError, Result};
use crate::io;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const SPARSE_MAGIC: &[u8; 8] = b"NESTSPR1";

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
struct Posting {
    passage_id: u32,
    term_freq: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    /// term id -> postings sorted by passage id.
    postings: BTreeMap<u32, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

impl SparseIndex {
    pub fn build(store: &PassageStore) -> Self {
        Self::build_with_params(store, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with_params(store: &PassageStore, k1: f64, b: f64) -> Self {
        let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(store.len());
        for passage in store.passages() {
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for &t in &passage.tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            let mut terms: Vec<(u32, u32)> = tf.into_iter().collect();
            terms.sort_unstable_by_key(|&(t, _)| t);
            for (term, freq) in terms {
                postings.entry(term).or_default().push(Posting {
                    passage_id: passage.passage_id,
                    term_freq: freq,
                });
            }
            doc_lengths.push(passage.tokens.len() as u32);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Self { postings, doc_lengths, avg_doc_length, k1, b }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_frequency(&self, term: u32) -> usize {
        self.postings.get(&term).map(|p| p.len()).unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = u32> + '_ {
        self.postings.keys().copied()
    }

    fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = doc_freq as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score one term/passage pair. Exposed so independent scans can check
    /// the index path against direct formula evaluation.
    pub fn term_score(&self, term: u32, passage_id: u32) -> f64 {
        let Some(list) = self.postings.get(&term) else { return 0.0 };
        let Ok(idx) = list.binary_search_by_key(&passage_id, |p| p.passage_id) else {
            return 0.0;
        };
        let tf = list[idx].term_freq as f64;
        let dl = self.doc_lengths[passage_id as usize] as f64;
        let norm = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_length);
        self.idf(list.len()) * tf * (self.k1 + 1.0) / norm
    }

    /// Top-k passages by BM25. Query terms score once per occurrence, so a
    /// repeated query term weighs proportionally to its query frequency.
    pub fn search(&self, query: &[u32], k: usize) -> ScoredList {
        if k == 0 || self.doc_count() == 0 {
            return Vec::new();
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for &term in query {
            if let Some(list) = self.postings.get(&term) {
                let idf = self.idf(list.len());
                for posting in list {
                    let tf = posting.term_freq as f64;
                    let dl = self.doc_lengths[posting.passage_id as usize] as f64;
                    let norm =
                        tf + self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_length);
                    *scores.entry(posting.passage_id).or_insert(0.0) +=
                        idf * tf * (self.k1 + 1.0) / norm;
                }
            }
        }
        take_top_k(scores.into_iter().collect(), k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, SPARSE_MAGIC)?;
        io::write_f64(&mut w, self.k1)?;
        io::write_f64(&mut w, self.b)?;
        io::write_u32(&mut w, self.doc_lengths.len() as u32)?;
        for &l in &self.doc_lengths {
            io::write_varint(&mut w, u64::from(l))?;
        }
        io::write_u32(&mut w, self.postings.len() as u32)?;
        for (term, list) in &self.postings {
            io::write_u32(&mut w, *term)?;
            io::write_u32(&mut w, list.len() as u32)?;
            let mut prev = 0u32;
            for p in list {
                io::write_varint(&mut w, u64::from(p.passage_id - prev))?;
                io::write_varint(&mut w, u64::from(p.term_freq))?;
                prev = p.passage_id;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, SPARSE_MAGIC)?;
        let k1 = io::read_f64(&mut r)?;
        let b = io::read_f64(&mut r)?;
        let doc_count = io::read_u32(&mut r)? as usize;
        let mut doc_lengths = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            doc_lengths.push(io::read_varint(&mut r)? as u32);
        }
        let term_count = io::read_u32(&mut r)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..term_count {
            let term = io::read_u32(&mut r)?;
            let len = io::read_u32(&mut r)? as usize;
            let mut list = Vec::with_capacity(len);
            let mut prev = 0u32;
            for i in 0..len {
                let gap = io::read_varint(&mut r)? as u32;
                let id = if i == 0 { gap } else { prev + gap };
                let tf = io::read_varint(&mut r)? as u32;
                if id as usize >= doc_count {
                    return Err(NestError::format("posting passage id out of range"));
                }
                list.push(Posting { passage_id: id, term_freq: tf });
                prev = id;
            }
            postings.insert(term, list);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self { postings, doc_lengths, avg_doc_length, k1, b })
    }
}
