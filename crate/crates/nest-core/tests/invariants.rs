//! Property tests for the structural invariants: segmentation partitions,
//! mask respect, backend consistency, scan-oracle equivalence, ordering,
//! and normalization.

mod common;

use common::World;
use nest_core::corpus::{segment_corpus, Document, MaskState};
use nest_core::lm::{LMBackend, TokenDistribution, ToyLm, ToyLmConfig};
use nest_core::mixture::{mix, rrc_lambda, InterpolationParams};
use nest_core::retrieval::{fuse, DenseIndex, FusionConfig};
use nest_core::token_store::{
    knn_distribution, knn_search, KvMeta, Neighbor, NeighborSet, TokenKv,
};
use nest_core::tokenizer::Tokenizer;
use proptest::prelude::*;

fn arb_docs() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(0u32..30, 0..60), 1..8).prop_map(|token_docs| {
        token_docs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Document {
                id: format!("d{i}"),
                text: tokens
                    .iter()
                    .map(|t| format!("w{t}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn segmentation_partitions_every_document(docs in arb_docs(), m in 2usize..12) {
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        let seg = segment_corpus(&docs, &tok, m).unwrap();
        for doc in &docs {
            let expect = tok.encode(&doc.text);
            let mut rebuilt = Vec::new();
            for p in seg.store.passages().iter().filter(|p| p.doc_id == doc.id) {
                prop_assert!(p.tokens.len() <= m && !p.tokens.is_empty());
                prop_assert_eq!(p.start_offset, rebuilt.len());
                rebuilt.extend_from_slice(&p.tokens);
            }
            prop_assert_eq!(rebuilt, expect);
        }
        // Ids are dense and ordered.
        for (i, p) in seg.store.passages().iter().enumerate() {
            prop_assert_eq!(p.passage_id as usize, i);
        }
    }

    #[test]
    fn get_ngram_respects_masks(
        tokens in prop::collection::vec(0u32..20, 2..30),
        masked in prop::collection::vec((0u32..30), 0..10),
        pos in 0u32..29,
        n in 0usize..40,
    ) {
        let text = tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ");
        let docs = vec![Document { id: "d".into(), text }];
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        let store = segment_corpus(&docs, &tok, 100).unwrap().store;
        let len = store.get(0).unwrap().tokens.len() as u32;
        let mut mask = MaskState::new();
        for &p in &masked {
            if p < len {
                mask.mask_span(0, p, 1);
            }
        }
        if pos < len {
            let gram = store.get_ngram(0, pos, n, &mask).unwrap();
            prop_assert!(gram.len() <= n);
            for (i, _) in gram.iter().enumerate() {
                prop_assert!(!mask.is_masked(0, pos + i as u32));
            }
        } else {
            prop_assert!(store.get_ngram(0, pos, n, &mask).is_err());
        }
    }

    #[test]
    fn forward_all_consistency_on_random_contexts(
        ctx in prop::collection::vec(0u32..12, 1..20),
        train in prop::collection::vec(prop::collection::vec(3u32..12, 1..30), 1..4),
    ) {
        let lm = ToyLm::train(&train, 12, &ToyLmConfig { hidden_dim: 16, ..Default::default() })
            .unwrap();
        let all = lm.forward_all(&ctx).unwrap();
        prop_assert_eq!(all.len(), ctx.len());
        for j in 0..ctx.len() {
            let (dist, hidden) = lm.forward(&ctx[..=j]).unwrap();
            prop_assert_eq!(all[j].0.probs(), dist.probs());
            prop_assert_eq!(&all[j].1, &hidden);
            prop_assert!((dist.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_matches_oracle_and_respects_masks(
        keys in prop::collection::vec(prop::collection::vec(-8i32..8, 4), 1..40),
        query in prop::collection::vec(-8i32..8, 4),
        r in 1usize..12,
        masked in prop::collection::vec(0usize..40, 0..6),
    ) {
        let entries: Vec<(Vec<f64>, KvMeta)> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                (
                    k.iter().map(|&x| x as f64).collect(),
                    KvMeta { value: (i % 5) as u32, passage_id: (i / 7) as u32, position: (i % 7 + 1) as u32 },
                )
            })
            .collect();
        let kv = TokenKv::from_entries(4, entries.clone()).unwrap();
        let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let mut mask = MaskState::new();
        for &i in &masked {
            if i < entries.len() {
                let m = entries[i].1;
                mask.mask_span(m.passage_id, m.position, 1);
            }
        }

        // Oracle: exhaustive scan + total-order sort.
        let mut expect: Vec<(f64, KvMeta)> = entries
            .iter()
            .filter(|(_, m)| !mask.is_masked(m.passage_id, m.position))
            .map(|(k, m)| {
                let d: f64 = k.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d, *m)
            })
            .collect();
        expect.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| (a.1.passage_id, a.1.position).cmp(&(b.1.passage_id, b.1.position)))
        });
        expect.truncate(r);

        let got = knn_search(&kv, &q, r, &mask).unwrap();
        prop_assert_eq!(got.len(), expect.len());
        for (n, (s, m)) in got.iter().zip(&expect) {
            prop_assert_eq!(n.score, *s);
            prop_assert_eq!((n.passage_id, n.position), (m.passage_id, m.position));
        }
    }

    #[test]
    fn knn_distribution_normalized_and_pooled(
        scores in prop::collection::vec(-50.0f64..0.0, 1..40),
        values in prop::collection::vec(0u32..6, 40),
        mu in 0.01f64..4.0,
    ) {
        let neighbors: Vec<Neighbor> = scores
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (&s, &v))| Neighbor { score: s, value: v, passage_id: 0, position: i as u32 + 1 })
            .collect();
        let ns = NeighborSet::new(neighbors.clone());
        let dist = knn_distribution(&ns, mu).unwrap();
        prop_assert!((dist.sum() - 1.0).abs() < 1e-9);

        // Aggregation: each token's mass equals the sum of its neighbors'.
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = neighbors.iter().map(|n| (mu * (n.score - max)).exp()).sum();
        for v in 0..6u32 {
            let expect: f64 = neighbors
                .iter()
                .filter(|n| n.value == v)
                .map(|n| (mu * (n.score - max)).exp())
                .sum::<f64>()
                / total;
            prop_assert!((dist.prob(v) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_normalized_for_random_states(
        lm_weights in prop::collection::vec(0.01f64..10.0, 6),
        scores in prop::collection::vec(-30.0f64..0.0, 0..20),
        lambda_raw in 0.0f64..1.0,
    ) {
        let total: f64 = lm_weights.iter().sum();
        let p_lm = TokenDistribution::new(lm_weights.iter().map(|w| w / total).collect());
        let neighbors: Vec<Neighbor> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Neighbor { score: s, value: (i % 6) as u32, passage_id: 0, position: i as u32 + 1 })
            .collect();
        let ns = NeighborSet::new(neighbors);
        let p_knn = knn_distribution(&ns, 0.125).unwrap();
        let p_m = mix(&p_lm, &p_knn, lambda_raw).unwrap();
        prop_assert!((p_m.sum() - 1.0).abs() < 1e-9);
        if !p_knn.is_empty() {
            prop_assert!((p_knn.sum() - 1.0).abs() < 1e-9);
        }
        // Dynamic lambda stays in bounds too.
        let l = rrc_lambda(&ns, &InterpolationParams::default());
        prop_assert!(l > 0.0 && l <= 1.0);
    }

    #[test]
    fn fusion_output_sorted_and_idempotent(
        scores in prop::collection::vec(0.01f64..10.0, 1..30),
        b in 1usize..20,
        rank_probe in 1usize..30,
    ) {
        let mut list: Vec<(u32, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (i as u32, s))
            .collect();
        list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let cfg = FusionConfig { rank_probe, retrieve_k: 30, ..Default::default() };
        let fused = fuse(&list, &list, &cfg, b).unwrap();
        // Identical sides keep identical scores and order.
        let expect: Vec<(u32, f64)> = list.iter().take(b).cloned().collect();
        prop_assert_eq!(fused.len(), expect.len());
        for ((gi, gs), (ei, es)) in fused.iter().zip(&expect) {
            prop_assert_eq!(gi, ei);
            prop_assert!((gs - es).abs() < 1e-12);
        }
    }

    #[test]
    fn search_results_strictly_ordered(
        texts in prop::collection::vec(prop::collection::vec(0u32..15, 1..25), 1..12),
        query in prop::collection::vec(0u32..15, 1..6),
    ) {
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("d{i}"),
                text: t.iter().map(|x| format!("w{x}")).collect::<Vec<_>>().join(" "),
            })
            .collect();
        let world = World::build(&docs, 20);
        let q_ids = world
            .tokenizer
            .encode(&query.iter().map(|x| format!("w{x}")).collect::<Vec<_>>().join(" "));

        let sparse_hits = world.sparse.search(&q_ids, 50);
        let dense_hits = world.dense.search(&world.embedder.embed(&q_ids), 50).unwrap();
        for hits in [&sparse_hits, &dense_hits] {
            for w in hits.windows(2) {
                let ordered = w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0);
                prop_assert!(ordered, "ranking must follow (score desc, id asc)");
            }
        }
    }
}

#[test]
fn dense_index_build_matches_per_passage_embedding() {
    let docs: Vec<Document> = (0..10)
        .map(|i| Document { id: format!("d{i}"), text: format!("w{i} w{} w{}", i + 1, i + 2) })
        .collect();
    let world = World::build(&docs, 20);
    let rebuilt = DenseIndex::build(&world.store, &world.embedder);
    for p in world.store.passages() {
        assert_eq!(
            rebuilt.vector(p.passage_id).unwrap(),
            &world.embedder.embed(&p.tokens)[..]
        );
    }
}
