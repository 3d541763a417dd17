//! First-stage passage retrieval: BM25 over an inverted index, exact dense
//! scan over bag-of-words embeddings, and confidence-weighted score fusion.

pub mod dense;
pub mod fusion;
pub mod sparse;

pub use dense::{DenseIndex, Embedder};
pub use fusion::{fuse, FusionConfig};
pub use sparse::SparseIndex;

/// Ranked `(passage_id, score)` pairs, sorted by descending score with ties
/// broken by ascending passage id.
pub type ScoredList = Vec<(u32, f64)>;

/// Canonical ranking order: score descending, then passage id ascending.
pub(crate) fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Keep the top `k` entries of a scored list under the canonical order.
pub(crate) fn take_top_k(mut scored: ScoredList, k: usize) -> ScoredList {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}
