//! Hybrid score fusion: the blend weight between dense and sparse rankings
//! comes from each ranking's relative confidence (how far the score at a
//! probe rank has fallen from the top score).

use super::{take_top_k, ScoredList};
use crate::error::{NestError, Result};
use std::collections::HashMap;

/// Floor applied to scores before confidence ratios; keeps the ratio sane
/// when a list's best score is zero or negative.
const SCORE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// 1-based rank whose score is compared against the best score. When a
    /// list is shorter, its last score is used instead.
    pub rank_probe: usize,
    pub sparse_weight: f64,
    pub dense_weight: f64,
    /// How many candidates each side retrieves before fusion.
    pub retrieve_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rank_probe: 100,
            sparse_weight: 0.7,
            dense_weight: 0.3,
            retrieve_k: 4000,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_probe == 0 || self.rank_probe > self.retrieve_k {
            return Err(NestError::config(
                "rank-probe",
                format!(
                    "must satisfy 1 <= rank_probe <= retrieve_k ({}), got {}",
                    self.retrieve_k, self.rank_probe
                ),
            ));
        }
        Ok(())
    }
}

/// Uncertainty of one ranking: 1 - probe_score / best_score, clamped to
/// [0, 1]. A flat list (probe close to the top) gives ~0, a steep drop ~1.
fn list_uncertainty(list: &ScoredList, rank_probe: usize) -> f64 {
    let best = list[0].1.max(SCORE_FLOOR);
    let probe_idx = rank_probe.min(list.len()) - 1;
    let probe = list[probe_idx].1.max(SCORE_FLOOR);
    (1.0 - probe / best).clamp(0.0, 1.0)
}

/// Blend the two rankings and keep the top `b` passages.
///
/// The dense-side weight is `eta = sparse_weight * (1 - eta_sparse) +
/// dense_weight * eta_dense`; each document scores `eta * dense + (1 - eta)
/// * sparse`, substituting a list's minimum score for documents it is
/// missing from. If one list is empty all weight goes to the other.
pub fn fuse(
    dense: &ScoredList,
    sparse: &ScoredList,
    config: &FusionConfig,
    b: usize,
) -> Result<ScoredList> {
    config.validate()?;
    if dense.is_empty() && sparse.is_empty() {
        return Ok(Vec::new());
    }

    let eta = if sparse.is_empty() {
        1.0
    } else if dense.is_empty() {
        0.0
    } else {
        let eta_dense = list_uncertainty(dense, config.rank_probe);
        let eta_sparse = list_uncertainty(sparse, config.rank_probe);
        (config.sparse_weight * (1.0 - eta_sparse) + config.dense_weight * eta_dense)
            .clamp(0.0, 1.0)
    };

    let min_dense = dense.last().map(|&(_, s)| s).unwrap_or(0.0);
    let min_sparse = sparse.last().map(|&(_, s)| s).unwrap_or(0.0);

    let mut dense_by_id: HashMap<u32, f64> = HashMap::with_capacity(dense.len());
    for &(id, s) in dense {
        dense_by_id.insert(id, s);
    }
    let mut sparse_by_id: HashMap<u32, f64> = HashMap::with_capacity(sparse.len());
    for &(id, s) in sparse {
        sparse_by_id.insert(id, s);
    }

    let mut ids: Vec<u32> = dense_by_id.keys().copied().collect();
    for id in sparse_by_id.keys() {
        if !dense_by_id.contains_key(id) {
            ids.push(*id);
        }
    }

    let fused: ScoredList = ids
        .into_iter()
        .map(|id| {
            let ds = dense_by_id.get(&id).copied().unwrap_or(min_dense);
            let ss = sparse_by_id.get(&id).copied().unwrap_or(min_sparse);
            (id, eta * ds + (1.0 - eta) * ss)
        })
        .collect();

    Ok(take_top_k(fused, b))
}
