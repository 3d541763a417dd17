//! Deterministic synthetic corpora for tests and benchmarks.
//!
//! Documents are topic-structured word salads: each document draws most of
//! its tokens from a small per-document topic vocabulary, with function
//! words and occasional global words mixed in. Retrieval therefore finds
//! the right documents by lexical overlap while a bigram model only gets
//! weak local signal.

use crate::corpus::Document;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FUNCTION_WORDS: [&str; 8] = ["the", "and", "of", "to", "in", "for", "on", "with"];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub content_words: usize,
    pub topic_size: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            content_words: 240,
            topic_size: 24,
            min_doc_len: 120,
            max_doc_len: 200,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i:03}")
}

fn sample_topic(rng: &mut ChaCha8Rng, opts: &SynthOptions) -> Vec<usize> {
    let mut topic = Vec::with_capacity(opts.topic_size);
    while topic.len() < opts.topic_size {
        let w = rng.gen_range(0..opts.content_words);
        if !topic.contains(&w) {
            topic.push(w);
        }
    }
    topic
}

fn sample_tokens(rng: &mut ChaCha8Rng, topic: &[usize], len: usize, opts: &SynthOptions) -> Vec<String> {
    (0..len)
        .map(|_| {
            let roll: f64 = rng.gen();
            if roll < 0.75 {
                word(topic[rng.gen_range(0..topic.len())])
            } else if roll < 0.90 {
                FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_string()
            } else {
                word(rng.gen_range(0..opts.content_words))
            }
        })
        .collect()
}

/// Generate `count` topic documents. The same seed always produces the same
/// corpus.
pub fn synth_documents(seed: u64, count: usize, opts: &SynthOptions) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let topic = sample_topic(&mut rng, opts);
            let len = rng.gen_range(opts.min_doc_len..=opts.max_doc_len);
            let tokens = sample_tokens(&mut rng, &topic, len, opts);
            Document {
                id: format!("doc{i:04}"),
                text: tokens.join(" "),
            }
        })
        .collect()
}

/// A fork cluster: one minority document `stem + tail_a` plus
/// `majority_copies` identical documents `stem + tail_b`. Copying the
/// minority document hits a point where most retrieved continuations
/// disagree with it, so acceptance of the minority path depends on the
/// relaxation factor.
#[derive(Debug, Clone, Copy)]
pub struct ForkCluster {
    pub stem_len: usize,
    pub tail_len: usize,
    pub majority_copies: usize,
}

/// Build one fork cluster. The minority document comes first so it gets the
/// smallest passage id (and thereby wins exact-match tie-breaks).
pub fn fork_documents(
    seed: u64,
    cluster: usize,
    fork: &ForkCluster,
    opts: &SynthOptions,
) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xf0f0 + cluster as u64));
    let topic = sample_topic(&mut rng, opts);
    let stem = sample_tokens(&mut rng, &topic, fork.stem_len, opts);
    let tail_minority = sample_tokens(&mut rng, &topic, fork.tail_len, opts);
    let tail_majority = sample_tokens(&mut rng, &topic, fork.tail_len, opts);

    let mut docs = Vec::with_capacity(1 + fork.majority_copies);
    let mut minority_text = stem.clone();
    minority_text.extend_from_slice(&tail_minority);
    docs.push(Document {
        id: format!("fork{cluster}_min"),
        text: minority_text.join(" "),
    });
    let mut majority_text = stem;
    majority_text.extend_from_slice(&tail_majority);
    let majority_text = majority_text.join(" ");
    for j in 0..fork.majority_copies {
        docs.push(Document {
            id: format!("fork{cluster}_maj{j}"),
            text: majority_text.clone(),
        });
    }
    docs
}
