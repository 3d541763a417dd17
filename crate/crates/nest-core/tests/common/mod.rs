//! Shared fixtures: build a full pipeline world from documents, plus the
//! attribution soundness check used across the generation suites.

use nest_core::corpus::{segment_corpus, Document, PassageStore};
use nest_core::decoder::{GenerationResult, Pipeline};
use nest_core::lm::{ToyLm, ToyLmConfig};
use nest_core::mixture::InterpolationParams;
use nest_core::retrieval::{DenseIndex, Embedder, FusionConfig, SparseIndex};
use nest_core::tokenizer::Tokenizer;

pub struct World {
    pub tokenizer: Tokenizer,
    pub store: PassageStore,
    pub lm: ToyLm,
    pub sparse: SparseIndex,
    pub dense: DenseIndex,
    pub embedder: Embedder,
}

impl World {
    pub fn build(docs: &[Document], max_passage: usize) -> World {
        let tokenizer = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        let store = segment_corpus(docs, &tokenizer, max_passage).unwrap().store;
        let streams: Vec<Vec<u32>> = docs.iter().map(|d| tokenizer.encode(&d.text)).collect();
        let lm = ToyLm::train(&streams, tokenizer.vocab_size(), &ToyLmConfig::default()).unwrap();
        let embedder = Embedder::default();
        let sparse = SparseIndex::build(&store);
        let dense = DenseIndex::build(&store, &embedder);
        World { tokenizer, store, lm, sparse, dense, embedder }
    }

    pub fn pipeline(&self, opts: &PipelineOpts) -> Pipeline<'_> {
        Pipeline {
            backend: &self.lm,
            store: &self.store,
            sparse: &self.sparse,
            dense: &self.dense,
            embedder: &self.embedder,
            fusion: FusionConfig {
                rank_probe: opts.rank_probe,
                retrieve_k: opts.retrieve_k,
                ..FusionConfig::default()
            },
            passages_b: opts.passages_b,
            neighbors_r: opts.neighbors_r,
            mu: opts.mu,
            interp: opts.interp,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineOpts {
    pub passages_b: usize,
    pub neighbors_r: usize,
    pub mu: f64,
    pub retrieve_k: usize,
    pub rank_probe: usize,
    pub interp: InterpolationParams,
}

impl Default for PipelineOpts {
    fn default() -> Self {
        Self {
            passages_b: 40,
            neighbors_r: 1024,
            mu: 0.125,
            retrieve_k: 400,
            rank_probe: 100,
            interp: InterpolationParams::default(),
        }
    }
}

impl PipelineOpts {
    /// Settings for verbatim-copy scenarios: a sharper retrieval softmax so
    /// exact key matches dominate the unit-sphere toy geometry.
    pub fn copy_tuned() -> Self {
        Self { mu: 16.0, ..Self::default() }
    }
}

/// Every attribution record must reproduce the corpus verbatim, no corpus
/// position may be copied twice, and records must tile the output in order.
pub fn assert_attribution_sound(world: &World, result: &GenerationResult) {
    let mut seen = std::collections::HashSet::new();
    for rec in &result.attributions {
        let passage = world.store.get(rec.passage_id).expect("attributed passage exists");
        assert_eq!(passage.doc_id, rec.doc_id);
        let copied = &result.tokens[rec.begin..rec.end];
        let source =
            &passage.tokens[rec.position as usize..rec.position as usize + copied.len()];
        assert_eq!(copied, source, "attributed tokens must reproduce the corpus span");
        for i in 0..copied.len() {
            assert!(
                seen.insert((rec.passage_id, rec.position + i as u32)),
                "corpus position used twice in one generation"
            );
        }
    }
    for pair in result.attributions.windows(2) {
        assert!(pair[0].end <= pair[1].begin, "records must be ordered and disjoint");
    }
}
