//! Document ingestion, passage segmentation, n-gram lookup, and per-generation
//! span masking.

use crate::error::{NestError, Result};
use crate::io;
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use std::collections::{HashSet, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PASSAGE_MAGIC: &[u8; 8] = b"NESTPAS1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// A contiguous segment of one document's token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: u32,
    pub doc_id: String,
    pub tokens: Vec<u32>,
    /// Token index of this passage's first token within its document.
    pub start_offset: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
}

/// Segmentation output: the store plus a count of documents skipped because
/// they tokenized to nothing.
#[derive(Debug)]
pub struct Segmentation {
    pub store: PassageStore,
    pub skipped_empty: usize,
}

/// Split documents into passages of at most `max_tokens` tokens by greedy
/// left-to-right packing. Passages never cross document boundaries.
pub fn segment_corpus(
    documents: &[Document],
    tokenizer: &Tokenizer,
    max_tokens: usize,
) -> Result<Segmentation> {
    if max_tokens < 2 {
        return Err(NestError::config(
            "max-passage-tokens",
            format!("must be >= 2, got {max_tokens}"),
        ));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for doc in documents {
        if !seen.insert(doc.id.as_str()) {
            return Err(NestError::DuplicateDocId(doc.id.clone()));
        }
    }

    let mut passages = Vec::new();
    let mut skipped_empty = 0usize;
    for doc in documents {
        let tokens = tokenizer.encode(&doc.text);
        if tokens.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let mut offset = 0usize;
        while offset < tokens.len() {
            let take = max_tokens.min(tokens.len() - offset);
            passages.push(Passage {
                passage_id: passages.len() as u32,
                doc_id: doc.id.clone(),
                tokens: tokens[offset..offset + take].to_vec(),
                start_offset: offset,
            });
            offset += take;
        }
    }
    Ok(Segmentation {
        store: PassageStore { passages },
        skipped_empty,
    })
}

impl PassageStore {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        for (i, p) in passages.iter().enumerate() {
            if p.passage_id as usize != i {
                return Err(NestError::CorpusDesync(format!(
                    "passage at index {i} carries id {}",
                    p.passage_id
                )));
            }
        }
        Ok(Self { passages })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, passage_id: u32) -> Option<&Passage> {
        self.passages.get(passage_id as usize)
    }

    /// Fetch up to `n` tokens starting at `position` inside a passage,
    /// truncated at the first masked position or the passage end.
    pub fn get_ngram(
        &self,
        passage_id: u32,
        position: u32,
        n: usize,
        mask: &MaskState,
    ) -> Result<Vec<u32>> {
        let passage = self.get(passage_id).ok_or_else(|| {
            NestError::CorpusDesync(format!("unknown passage id {passage_id}"))
        })?;
        let pos = position as usize;
        if pos >= passage.tokens.len() {
            return Err(NestError::CorpusDesync(format!(
                "position {pos} out of range for passage {passage_id} of length {}",
                passage.tokens.len()
            )));
        }
        let mut out = Vec::with_capacity(n.min(passage.tokens.len() - pos));
        for i in 0..n.min(passage.tokens.len() - pos) {
            if mask.is_masked(passage_id, position + i as u32) {
                break;
            }
            out.push(passage.tokens[pos + i]);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, PASSAGE_MAGIC)?;
        // Token-id width in bytes; fixed at 4 for this format revision.
        io::write_u32(&mut w, 4)?;
        for p in &self.passages {
            io::write_u32(&mut w, p.passage_id)?;
            io::write_string(&mut w, &p.doc_id)?;
            io::write_u32(&mut w, p.tokens.len() as u32)?;
            for &t in &p.tokens {
                io::write_u32(&mut w, t)?;
            }
            io::write_u64(&mut w, p.start_offset as u64)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, PASSAGE_MAGIC)?;
        let width = io::read_u32(&mut r)?;
        if width != 4 {
            return Err(NestError::format(format!(
                "unsupported token width {width}"
            )));
        }
        let mut passages = Vec::new();
        loop {
            // Records run to end of file; distinguish clean EOF from a
            // record truncated mid-id.
            let mut first = [0u8; 1];
            if r.read(&mut first)? == 0 {
                break;
            }
            let mut rest = [0u8; 3];
            r.read_exact(&mut rest)
                .map_err(|_| NestError::format("truncated passage record"))?;
            let probe = [first[0], rest[0], rest[1], rest[2]];
            let passage_id = u32::from_le_bytes(probe);
            let doc_id = io::read_string(&mut r)?;
            let count = io::read_u32(&mut r)? as usize;
            let mut tokens = Vec::with_capacity(count);
            for _ in 0..count {
                tokens.push(io::read_u32(&mut r)?);
            }
            let start_offset = io::read_u64(&mut r)? as usize;
            passages.push(Passage {
                passage_id,
                doc_id,
                tokens,
                start_offset,
            });
        }
        Self::from_passages(passages)
    }
}

/// Corpus positions already copied into the current generation. Grows
/// monotonically over one generation and is never shared between
/// generations.
#[derive(Debug, Clone, Default)]
pub struct MaskState {
    masked: HashSet<(u32, u32)>,
    /// Passages with at least one masked position; lets scans skip the
    /// per-position probe for the (vast) untouched majority.
    touched: HashSet<u32>,
}

impl MaskState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_masked(&self, passage_id: u32, position: u32) -> bool {
        self.masked.contains(&(passage_id, position))
    }

    pub fn passage_touched(&self, passage_id: u32) -> bool {
        self.touched.contains(&passage_id)
    }

    pub fn mask_span(&mut self, passage_id: u32, start: u32, length: usize) {
        if length > 0 {
            self.touched.insert(passage_id);
        }
        for i in 0..length {
            self.masked.insert((passage_id, start + i as u32));
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Read one JSON document per line with fields `id` and `text`.
pub fn read_documents_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in std::io::BufRead::lines(reader).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            NestError::format(format!("line {}: {e}", lineno + 1))
        })?;
        if let Some(prev) = ids.insert(doc.id.clone(), lineno) {
            return Err(NestError::format(format!(
                "line {}: duplicate doc id `{}` (first on line {})",
                lineno + 1,
                doc.id,
                prev + 1
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Tokenizer, Vec<Document>) {
        let docs = vec![
            Document { id: "d1".into(), text: "a b c d e".into() },
            Document { id: "d2".into(), text: "f g h".into() },
        ];
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        (tok, docs)
    }

    #[test]
    fn greedy_packing_sizes() {
        let (tok, _) = fixture();
        let docs = vec![Document { id: "d".into(), text: "a b c d e".into() }];
        let seg = segment_corpus(&docs, &tok, 2).unwrap();
        let sizes: Vec<usize> = seg.store.passages().iter().map(|p| p.tokens.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn max_size_document_fits_one_passage() {
        let text = (0..200).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let docs = vec![Document { id: "d".into(), text }];
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        let seg = segment_corpus(&docs, &tok, 200).unwrap();
        assert_eq!(seg.store.len(), 1);
        assert_eq!(seg.store.get(0).unwrap().tokens.len(), 200);
    }

    #[test]
    fn documents_never_merge() {
        let (tok, docs) = fixture();
        let seg = segment_corpus(&docs, &tok, 10).unwrap();
        assert_eq!(seg.store.len(), 2);
        assert_eq!(seg.store.get(0).unwrap().doc_id, "d1");
        assert_eq!(seg.store.get(1).unwrap().doc_id, "d2");
    }

    #[test]
    fn empty_document_skipped_with_count() {
        let docs = vec![
            Document { id: "d1".into(), text: "a b".into() },
            Document { id: "d2".into(), text: "   ".into() },
        ];
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        let seg = segment_corpus(&docs, &tok, 5).unwrap();
        assert_eq!(seg.skipped_empty, 1);
        assert_eq!(seg.store.len(), 1);
    }

    #[test]
    fn duplicate_doc_id_rejected() {
        let docs = vec![
            Document { id: "d".into(), text: "a".into() },
            Document { id: "d".into(), text: "b".into() },
        ];
        let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()));
        assert!(matches!(
            segment_corpus(&docs, &tok, 5),
            Err(NestError::DuplicateDocId(_))
        ));
    }

    #[test]
    fn segmentation_partitions_documents() {
        let (tok, docs) = fixture();
        for m in 2..6 {
            let seg = segment_corpus(&docs, &tok, m).unwrap();
            for doc in &docs {
                let total: usize = seg
                    .store
                    .passages()
                    .iter()
                    .filter(|p| p.doc_id == doc.id)
                    .map(|p| p.tokens.len())
                    .sum();
                assert_eq!(total, tok.encode(&doc.text).len());
                // Concatenating a document's passages in id order reproduces it.
                let mut rebuilt = Vec::new();
                for p in seg.store.passages().iter().filter(|p| p.doc_id == doc.id) {
                    assert_eq!(p.start_offset, rebuilt.len());
                    rebuilt.extend_from_slice(&p.tokens);
                }
                assert_eq!(rebuilt, tok.encode(&doc.text));
            }
        }
    }

    #[test]
    fn get_ngram_basic_and_truncation() {
        let tok = Tokenizer::build(["a b c d"]);
        let docs = vec![Document { id: "d".into(), text: "a b c d".into() }];
        let seg = segment_corpus(&docs, &tok, 10).unwrap();
        let store = seg.store;
        let mask = MaskState::new();
        let toks = &store.get(0).unwrap().tokens.clone();

        assert_eq!(store.get_ngram(0, 1, 2, &mask).unwrap(), toks[1..3].to_vec());
        assert_eq!(store.get_ngram(0, 0, 10, &mask).unwrap(), toks.clone());

        let mut mask = MaskState::new();
        mask.mask_span(0, 2, 1);
        assert_eq!(store.get_ngram(0, 0, 4, &mask).unwrap(), toks[0..2].to_vec());
    }

    #[test]
    fn get_ngram_oracle_matches_linear_scan() {
        // Oracle: walk positions one by one, stopping at mask or end.
        let tok = Tokenizer::build(["a b c d e f g h"]);
        let docs = vec![Document { id: "d".into(), text: "a b c d e f g h".into() }];
        let store = segment_corpus(&docs, &tok, 10).unwrap().store;
        let mut mask = MaskState::new();
        mask.mask_span(0, 3, 2);
        mask.mask_span(0, 7, 1);
        let toks = store.get(0).unwrap().tokens.clone();
        for pos in 0..toks.len() as u32 {
            for n in 0..10usize {
                let mut expect = Vec::new();
                for i in 0..n {
                    let p = pos as usize + i;
                    if p >= toks.len() || mask.is_masked(0, pos + i as u32) {
                        break;
                    }
                    expect.push(toks[p]);
                }
                assert_eq!(store.get_ngram(0, pos, n, &mask).unwrap(), expect);
            }
        }
    }

    #[test]
    fn get_ngram_out_of_range_is_desync() {
        let tok = Tokenizer::build(["a b"]);
        let docs = vec![Document { id: "d".into(), text: "a b".into() }];
        let store = segment_corpus(&docs, &tok, 10).unwrap().store;
        assert!(matches!(
            store.get_ngram(0, 5, 1, &MaskState::new()),
            Err(NestError::CorpusDesync(_))
        ));
        assert!(matches!(
            store.get_ngram(9, 0, 1, &MaskState::new()),
            Err(NestError::CorpusDesync(_))
        ));
    }

    #[test]
    fn mask_span_set_semantics() {
        let mut mask = MaskState::new();
        mask.mask_span(7, 0, 2);
        assert!(mask.is_masked(7, 0) && mask.is_masked(7, 1));
        assert_eq!(mask.len(), 2);

        mask.mask_span(7, 0, 2);
        assert_eq!(mask.len(), 2, "re-masking is idempotent");

        mask.mask_span(7, 1, 2);
        assert_eq!(mask.len(), 3, "overlapping spans union");
        assert!(mask.is_masked(7, 2));
    }

    #[test]
    fn store_round_trips_and_is_deterministic() {
        let (tok, docs) = fixture();
        let seg = segment_corpus(&docs, &tok, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        seg.store.save(&p1).unwrap();
        let loaded = PassageStore::load(&p1).unwrap();
        assert_eq!(loaded.passages(), seg.store.passages());
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
