//! Confidence-based interpolation of the model and retrieval distributions.
//!
//! The interpolation coefficient lambda comes from the spread of neighbor
//! similarity magnitudes: when the best match is far better than the worst,
//! retrieval is trusted (small lambda); when all matches look alike the
//! model is trusted (large lambda). A fixed lambda can override the dynamic
//! rule for the plain interpolation baseline.

use crate::error::{NestError, Result};
use crate::lm::TokenDistribution;
use crate::token_store::{KnnDistribution, NeighborSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationParams {
    /// Sigmoid offset applied to the min/max score-magnitude ratio.
    pub alpha: f64,
    /// Sigmoid scale; must be positive.
    pub tau: f64,
    /// When set, bypasses the dynamic rule entirely.
    pub fixed_lambda: Option<f64>,
    /// Compatibility switch: use raw signed scores in the ratio instead of
    /// magnitudes. Inverts the ratio's meaning for negative similarities;
    /// off by default.
    pub signed_ratio: bool,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        Self { alpha: 0.3, tau: 0.1, fixed_lambda: None, signed_ratio: false }
    }
}

impl InterpolationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(NestError::config("tau", "must be > 0"));
        }
        if !self.alpha.is_finite() {
            return Err(NestError::config("alpha", "must be finite"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(NestError::config("fixed-lambda", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Interpolation coefficient for one step.
///
/// `lambda = sigmoid((min|s| / max|s| - alpha) / tau)` over the neighbor
/// scores. No neighbors means no retrieval evidence, so lambda is 1 (pure
/// model). All-zero scores mean every neighbor is an exact match, the
/// strongest retrieval evidence there is, so the ratio is taken as 0.
pub fn rrc_lambda(neighbors: &NeighborSet, params: &InterpolationParams) -> f64 {
    if let Some(l) = params.fixed_lambda {
        return l;
    }
    if neighbors.is_empty() {
        return 1.0;
    }
    let ratio = if params.signed_ratio {
        let min = neighbors.iter().map(|n| n.score).fold(f64::INFINITY, f64::min);
        let max = neighbors.iter().map(|n| n.score).fold(f64::NEG_INFINITY, f64::max);
        if max == 0.0 {
            0.0
        } else {
            min / max
        }
    } else {
        let min = neighbors.iter().map(|n| n.score.abs()).fold(f64::INFINITY, f64::min);
        let max = neighbors.iter().map(|n| n.score.abs()).fold(0.0, f64::max);
        if max == 0.0 {
            0.0
        } else {
            min / max
        }
    };
    sigmoid((ratio - params.alpha) / params.tau)
}

/// `lambda * p_lm + (1 - lambda) * p_knn`, spread over the full vocabulary.
/// An empty retrieval distribution passes the model distribution through
/// unchanged.
pub fn mix(
    p_lm: &TokenDistribution,
    p_knn: &KnnDistribution,
    lambda: f64,
) -> Result<TokenDistribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NestError::config(
            "lambda",
            format!("must lie in [0, 1], got {lambda}"),
        ));
    }
    if p_knn.is_empty() {
        return Ok(p_lm.clone());
    }
    let mut probs: Vec<f64> = p_lm.probs().iter().map(|p| lambda * p).collect();
    for (token, p) in p_knn.iter() {
        if let Some(slot) = probs.get_mut(token as usize) {
            *slot += (1.0 - lambda) * p;
        }
    }
    Ok(TokenDistribution::new(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_store::Neighbor;

    fn neighbors(scores: &[f64]) -> NeighborSet {
        NeighborSet::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Neighbor {
                    score: s,
                    value: i as u32,
                    passage_id: 0,
                    position: i as u32 + 1,
                })
                .collect(),
        )
    }

    #[test]
    fn ratio_at_alpha_gives_half() {
        // min/max = 0.3 with alpha = 0.3 -> sigmoid(0) = 0.5 exactly.
        let ns = neighbors(&[-0.3, -1.0]);
        let params = InterpolationParams::default();
        assert!((rrc_lambda(&ns, &params) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn equal_nonzero_scores_give_sigmoid_seven() {
        // Oracle: ratio 1 -> sigmoid((1 - 0.3) / 0.1) = sigmoid(7).
        let ns = neighbors(&[-2.5, -2.5, -2.5]);
        let expect = 1.0 / (1.0 + (-7.0f64).exp());
        assert!((rrc_lambda(&ns, &InterpolationParams::default()) - expect).abs() < 1e-12);
    }

    #[test]
    fn exact_best_match_gives_sigmoid_minus_three() {
        // Oracle: ratio 0 -> sigmoid((0 - 0.3) / 0.1) = sigmoid(-3).
        let ns = neighbors(&[0.0, -1.7]);
        let expect = 1.0 / (1.0 + (3.0f64).exp());
        assert!((rrc_lambda(&ns, &InterpolationParams::default()) - expect).abs() < 1e-12);
    }

    #[test]
    fn all_exact_matches_treated_as_full_confidence() {
        let ns = neighbors(&[0.0, 0.0]);
        let expect = 1.0 / (1.0 + (3.0f64).exp());
        assert!((rrc_lambda(&ns, &InterpolationParams::default()) - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_neighbors_trust_the_model() {
        assert_eq!(rrc_lambda(&NeighborSet::empty(), &InterpolationParams::default()), 1.0);
    }

    #[test]
    fn fixed_lambda_overrides() {
        let params = InterpolationParams { fixed_lambda: Some(0.7), ..Default::default() };
        assert_eq!(rrc_lambda(&neighbors(&[0.0, -5.0]), &params), 0.7);
        assert_eq!(rrc_lambda(&NeighborSet::empty(), &params), 0.7);
    }

    #[test]
    fn lambda_monotone_in_ratio_and_bounded() {
        let params = InterpolationParams::default();
        let mut last = 0.0;
        for i in 0..100 {
            let ratio = i as f64 / 99.0;
            // Score pair (-ratio, -1) produces magnitude ratio `ratio`.
            let ns = neighbors(&[-ratio, -1.0]);
            let l = rrc_lambda(&ns, &params);
            assert!(l > 0.0 && l < 1.0);
            if i > 0 {
                assert!(l > last, "lambda must strictly increase with the ratio");
            }
            last = l;
        }
    }

    #[test]
    fn signed_ratio_compat_flag() {
        // Signed scores (-1, -4): min/max = -4/-1 = 4 -> very confident LM.
        let ns = neighbors(&[-1.0, -4.0]);
        let params = InterpolationParams { signed_ratio: true, ..Default::default() };
        let expect = sigmoid((4.0 - 0.3) / 0.1);
        assert!((rrc_lambda(&ns, &params) - expect).abs() < 1e-12);
    }

    #[test]
    fn mix_lambda_one_is_model_passthrough() {
        let p_lm = TokenDistribution::new(vec![0.25, 0.75]);
        let ns = neighbors(&[0.0]);
        let p_knn = crate::token_store::knn_distribution(&ns, 0.125).unwrap();
        let out = mix(&p_lm, &p_knn, 1.0).unwrap();
        assert_eq!(out.probs(), p_lm.probs());
    }

    #[test]
    fn mix_lambda_zero_is_point_mass() {
        let p_lm = TokenDistribution::new(vec![0.25, 0.75]);
        let ns = NeighborSet::new(vec![Neighbor { score: -1.0, value: 0, passage_id: 0, position: 1 }]);
        let p_knn = crate::token_store::knn_distribution(&ns, 0.125).unwrap();
        let out = mix(&p_lm, &p_knn, 0.0).unwrap();
        assert!((out.prob(0) - 1.0).abs() < 1e-12);
        assert_eq!(out.prob(1), 0.0);
    }

    #[test]
    fn mix_hand_arithmetic() {
        // Oracle: 0.7*(0.6, 0.4) + 0.3*(0, 1) = (0.42, 0.58).
        let p_lm = TokenDistribution::new(vec![0.6, 0.4]);
        let ns = NeighborSet::new(vec![Neighbor { score: -1.0, value: 1, passage_id: 0, position: 1 }]);
        let p_knn = crate::token_store::knn_distribution(&ns, 0.125).unwrap();
        let out = mix(&p_lm, &p_knn, 0.7).unwrap();
        assert!((out.prob(0) - 0.42).abs() < 1e-12);
        assert!((out.prob(1) - 0.58).abs() < 1e-12);
        assert!((out.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mix_empty_knn_is_passthrough() {
        let p_lm = TokenDistribution::new(vec![0.5, 0.5]);
        let out = mix(&p_lm, &KnnDistribution::default(), 0.2).unwrap();
        assert_eq!(out.probs(), p_lm.probs());
    }

    #[test]
    fn mix_rejects_out_of_range_lambda() {
        let p_lm = TokenDistribution::new(vec![1.0]);
        let p_knn = KnnDistribution::default();
        assert!(mix(&p_lm, &p_knn, -0.1).is_err());
        assert!(mix(&p_lm, &p_knn, 1.1).is_err());
    }

    #[test]
    fn mix_linear_in_lambda_pointwise() {
        let p_lm = TokenDistribution::new(vec![0.1, 0.9]);
        let ns = NeighborSet::new(vec![Neighbor { score: -0.5, value: 0, passage_id: 0, position: 1 }]);
        let p_knn = crate::token_store::knn_distribution(&ns, 0.125).unwrap();
        let at = |l: f64| mix(&p_lm, &p_knn, l).unwrap().prob(0);
        let (a, m, b) = (at(0.2), at(0.5), at(0.8));
        assert!(((a + b) / 2.0 - m).abs() < 1e-12);
    }
}
