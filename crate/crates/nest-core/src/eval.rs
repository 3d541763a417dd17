//! Metrics: teacher-forced perplexity for any decoding mode, ROUGE,
//! answer-level recall, and attribution coverage statistics.

use crate::corpus::MaskState;
use crate::decoder::{GenerationResult, Mode, Pipeline};
use crate::error::{NestError, Result};
use crate::lm::HiddenState;
use crate::mixture::{mix, rrc_lambda};
use crate::token_store::{build_kv, knn_distribution, knn_search_batch, TokenKv};
use crate::tokenizer;
use serde::{Deserialize, Serialize};

/// Probability floor for target tokens the mixture assigns (numerically)
/// zero mass; keeps perplexity finite on pathological backends.
const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub token_count: usize,
    pub avg_nll: f64,
    pub perplexity: f64,
    /// Positions where the probability floor kicked in.
    pub floored: usize,
}

/// Teacher-forced perplexity of `target` after `prefix`.
///
/// Retrieval (when the mode uses it) sees only the prefix. Each target
/// position rebuilds the mixture from a fresh neighbor search; no span
/// selection or draft evaluation is ever involved.
pub fn perplexity(
    pipeline: &Pipeline,
    mode: Mode,
    prefix: &[u32],
    target: &[u32],
) -> Result<PerplexityReport> {
    if target.is_empty() {
        return Err(NestError::config("target", "must be non-empty"));
    }

    // Full teacher-forced stream: BOS + prefix + target.
    let mut full = Vec::with_capacity(1 + prefix.len() + target.len());
    full.push(tokenizer::BOS);
    full.extend_from_slice(prefix);
    full.extend_from_slice(target);

    // States before each target position (one per target token).
    let states = pipeline.backend.forward_tail(&full[..full.len() - 1], target.len())?;

    let kv = if mode == Mode::Base || pipeline.store.is_empty() {
        TokenKv::default()
    } else {
        let retrieved = pipeline.retrieve(prefix)?;
        build_kv(pipeline.store, &retrieved, pipeline.backend)?
    };

    let mask = MaskState::new();
    let neighbor_sets = if kv.is_empty() {
        Vec::new()
    } else {
        let queries: Vec<HiddenState> = states.iter().map(|(_, h)| h.clone()).collect();
        knn_search_batch(&kv, &queries, pipeline.neighbors_r, &mask)?
    };

    let mut nll_sum = 0.0;
    let mut floored = 0usize;
    for (t, &token) in target.iter().enumerate() {
        let dist = &states[t].0;
        let p = if mode == Mode::Base || kv.is_empty() {
            dist.prob(token)
        } else {
            let ns = &neighbor_sets[t];
            let p_knn = knn_distribution(ns, pipeline.mu)?;
            let lambda = rrc_lambda(ns, &pipeline.interp);
            mix(dist, &p_knn, lambda)?.prob(token)
        };
        let p = if p < NLL_FLOOR {
            floored += 1;
            NLL_FLOOR
        } else {
            p
        };
        nll_sum += -p.ln();
    }

    let avg_nll = nll_sum / target.len() as f64;
    Ok(PerplexityReport {
        token_count: target.len(),
        avg_nll,
        perplexity: avg_nll.exp(),
        floored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Rouge {
    const ZERO: Rouge = Rouge { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_counts(overlap: f64, candidate_total: f64, reference_total: f64) -> Rouge {
        if candidate_total == 0.0 || reference_total == 0.0 {
            return Rouge::ZERO;
        }
        let precision = overlap / candidate_total;
        let recall = overlap / reference_total;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Rouge { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    N(usize),
    L,
}

fn ngram_counts(tokens: &[u32], n: usize) -> std::collections::HashMap<&[u32], usize> {
    let mut map = std::collections::HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=tokens.len() - n {
        *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    map
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE over token id sequences: clipped n-gram overlap for ROUGE-N,
/// longest common subsequence for ROUGE-L, F1 at beta = 1.
pub fn rouge(candidate: &[u32], reference: &[u32], variant: RougeVariant) -> Rouge {
    match variant {
        RougeVariant::N(n) => {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            let overlap: usize = refs
                .iter()
                .map(|(gram, &rc)| rc.min(cand.get(gram).copied().unwrap_or(0)))
                .sum();
            let cand_total: usize = cand.values().sum();
            let ref_total: usize = refs.values().sum();
            Rouge::from_counts(overlap as f64, cand_total as f64, ref_total as f64)
        }
        RougeVariant::L => {
            let lcs = lcs_len(candidate, reference);
            Rouge::from_counts(lcs as f64, candidate.len() as f64, reference.len() as f64)
        }
    }
}

/// Lowercase, strip punctuation, collapse whitespace.
fn normalize_answer(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// True when any normalized answer occurs as a substring of the normalized
/// output. Empty answer lists (and answers that normalize to nothing) miss.
pub fn answer_recall(output: &str, answers: &[String]) -> bool {
    let haystack = normalize_answer(output);
    answers.iter().any(|a| {
        let needle = normalize_answer(a);
        !needle.is_empty() && haystack.contains(&needle)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionStats {
    /// Fraction of output tokens covered by attribution records.
    pub ratio: f64,
    /// Mean length of maximal runs of contiguous output attributed to the
    /// same document. 0 when nothing is attributed.
    pub avg_length: f64,
}

/// Coverage statistics over a generation's attribution records. Adjacent
/// records merge into one run when they touch in the output and cite the
/// same document.
pub fn attribution_stats(result: &GenerationResult) -> AttributionStats {
    let total = result.tokens.len();
    if total == 0 || result.attributions.is_empty() {
        return AttributionStats { ratio: 0.0, avg_length: 0.0 };
    }
    let mut records = result.attributions.clone();
    records.sort_by_key(|r| r.begin);

    let covered: usize = records.iter().map(|r| r.end - r.begin).sum();
    let mut runs: Vec<usize> = Vec::new();
    let mut run_len = 0usize;
    let mut run_end = usize::MAX;
    let mut run_doc: Option<&str> = None;
    for r in &records {
        if run_doc == Some(r.doc_id.as_str()) && r.begin == run_end {
            run_len += r.end - r.begin;
        } else {
            if run_len > 0 {
                runs.push(run_len);
            }
            run_len = r.end - r.begin;
            run_doc = Some(r.doc_id.as_str());
        }
        run_end = r.end;
    }
    if run_len > 0 {
        runs.push(run_len);
    }

    AttributionStats {
        ratio: covered as f64 / total as f64,
        avg_length: runs.iter().sum::<usize>() as f64 / runs.len() as f64,
    }
}
