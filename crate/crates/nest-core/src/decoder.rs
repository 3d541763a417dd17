//! Generation loop: greedy selection from the mixture distribution, span
//! copying from retrieved passages, relaxed draft acceptance, continuation
//! extension, masking, and source attribution.
//!
//! Three modes share the loop. `base` is plain greedy decoding on the
//! backend. `knnlm` interpolates the retrieval distribution but emits one
//! token per step. `nest` additionally proposes corpus spans and keeps the
//! prefix the mixture accepts.

use crate::corpus::{MaskState, PassageStore};
use crate::error::{NestError, Result};
use crate::lm::{HiddenState, LMBackend, TokenDistribution};
use crate::mixture::{mix, rrc_lambda, InterpolationParams};
use crate::retrieval::{fuse, DenseIndex, Embedder, FusionConfig, SparseIndex};
use crate::token_store::{build_kv, knn_distribution, knn_search, knn_search_batch, NeighborSet, TokenKv};
use crate::tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    KnnLm,
    Nest,
}

impl std::str::FromStr for Mode {
    type Err = NestError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Mode::Base),
            "knnlm" => Ok(Mode::KnnLm),
            "nest" => Ok(Mode::Nest),
            other => Err(NestError::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceptance {
    Deterministic,
    Stochastic,
}

impl std::str::FromStr for Acceptance {
    type Err = NestError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Acceptance::Deterministic),
            "stochastic" => Ok(Acceptance::Stochastic),
            other => Err(NestError::config(
                "acceptance",
                format!("unknown acceptance variant `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: Mode,
    /// Proposed span length.
    pub ngram: usize,
    /// Span threshold: spans are considered only when lambda <= delta.
    pub delta: f64,
    /// Relaxation factor; smaller accepts more of each draft.
    pub gamma: f64,
    pub acceptance: Acceptance,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Nest,
            ngram: 64,
            delta: 0.5,
            gamma: 5e-2,
            acceptance: Acceptance::Deterministic,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngram < 1 {
            return Err(NestError::config("ngram", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(NestError::config("delta", "must lie in [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(NestError::config("gamma", "must lie in (0, 1]"));
        }
        if self.max_new_tokens < 1 {
            return Err(NestError::config("max-new-tokens", "must be >= 1"));
        }
        Ok(())
    }
}

/// A candidate n-gram copied from one passage.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftSpan {
    pub tokens: Vec<u32>,
    pub passage_id: u32,
    /// Position of `tokens[0]` within the passage.
    pub start: u32,
}

/// Output range `[begin, end)` copied verbatim from a corpus span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub begin: usize,
    pub end: usize,
    pub doc_id: String,
    pub passage_id: u32,
    /// Position of the first copied token within the passage.
    pub position: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepBranch {
    Token,
    Span,
    Continuation,
}

/// Per-iteration accounting. Each record covers one emitted token or one
/// draft evaluation (a continuation chain adds one record per draft).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStat {
    pub proposed: usize,
    pub accepted: usize,
    /// Tokens this record contributed to the output, replacement included.
    pub emitted: usize,
    pub lambda: f64,
    pub branch: StepBranch,
    pub replaced: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub passage_search_ms: f64,
    pub kv_build_ms: f64,
    pub lm_forward_ms: f64,
    pub token_search_ms: f64,
    pub bookkeeping_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub attributions: Vec<AttributionRecord>,
    pub steps: Vec<StepStat>,
    pub timings: Timings,
}

impl GenerationResult {
    pub fn emitted_per_step(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.tokens.len() as f64 / self.steps.len() as f64
    }
}

/// Everything a generation needs, wired once and shared across requests.
pub struct Pipeline<'a> {
    pub backend: &'a dyn LMBackend,
    pub store: &'a PassageStore,
    pub sparse: &'a SparseIndex,
    pub dense: &'a DenseIndex,
    pub embedder: &'a Embedder,
    pub fusion: FusionConfig,
    /// Passages kept after fusion.
    pub passages_b: usize,
    /// Neighbors retrieved per token query.
    pub neighbors_r: usize,
    /// Inverse temperature of the retrieval softmax.
    pub mu: f64,
    pub interp: InterpolationParams,
}

/// Call counters for the span/draft machinery, used to check that
/// evaluation-only paths never touch it. Thread-local so concurrent
/// generations in other tests don't bleed in.
pub mod instrumentation {
    use std::cell::Cell;

    thread_local! {
        static SPAN_SELECTIONS: Cell<u64> = const { Cell::new(0) };
        static DRAFT_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
    }

    pub(super) fn record_span_selection() {
        SPAN_SELECTIONS.with(|c| c.set(c.get() + 1));
    }

    pub(super) fn record_draft_evaluation() {
        DRAFT_EVALUATIONS.with(|c| c.set(c.get() + 1));
    }

    pub fn span_selections() -> u64 {
        SPAN_SELECTIONS.with(|c| c.get())
    }

    pub fn draft_evaluations() -> u64 {
        DRAFT_EVALUATIONS.with(|c| c.get())
    }
}

/// Greedy pick: highest mixture probability, ties to the lowest token id.
pub fn select_token(p_m: &TokenDistribution) -> u32 {
    p_m.argmax()
}

/// Choose the source span for a selected token: among neighbors carrying
/// that token value, the best-scored one wins (ties fall back to the
/// lowest source coordinates, which the neighbor ordering already encodes).
/// Returns `None` when the token is not among the neighbor values.
pub fn select_span(
    token: u32,
    neighbors: &NeighborSet,
    store: &PassageStore,
    n: usize,
    mask: &MaskState,
) -> Result<Option<DraftSpan>> {
    instrumentation::record_span_selection();
    let Some(best) = neighbors.iter().find(|nb| nb.value == token) else {
        return Ok(None);
    };
    let tokens = store.get_ngram(best.passage_id, best.position, n, mask)?;
    if tokens.is_empty() {
        return Ok(None);
    }
    debug_assert_eq!(tokens[0], token);
    Ok(Some(DraftSpan {
        tokens,
        passage_id: best.passage_id,
        start: best.position,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emit {
    Token(u32),
    Span(DraftSpan),
}

/// Threshold rule: emit the bare token when the model is trusted
/// (lambda above delta) or no span is available; otherwise emit the span.
pub fn decide_output(lambda: f64, delta: f64, token: u32, span: Option<DraftSpan>) -> Emit {
    match span {
        Some(s) if lambda <= delta => Emit::Span(s),
        _ => Emit::Token(token),
    }
}

/// Fetch the next draft after a fully accepted one: the same passage,
/// continuing right after the accepted tokens. `None` once the passage is
/// exhausted or the continuation start is masked.
pub fn extend_continuation(
    store: &PassageStore,
    span: &DraftSpan,
    accepted: usize,
    n: usize,
    mask: &MaskState,
) -> Result<Option<DraftSpan>> {
    let passage = store
        .get(span.passage_id)
        .ok_or_else(|| NestError::CorpusDesync(format!("unknown passage {}", span.passage_id)))?;
    let next = span.start as usize + accepted;
    if next >= passage.tokens.len() {
        return Ok(None);
    }
    let tokens = store.get_ngram(span.passage_id, next as u32, n, mask)?;
    if tokens.is_empty() {
        return Ok(None);
    }
    Ok(Some(DraftSpan {
        tokens,
        passage_id: span.passage_id,
        start: next as u32,
    }))
}

/// Outcome of evaluating one draft against the mixture distribution.
#[derive(Debug)]
pub struct DraftEvaluation {
    /// Accepted prefix length (position 1 counts even when exempt).
    pub accepted: usize,
    /// How many positions were actually tested.
    pub tested: usize,
    /// Re-selected token at the first rejected position, when the rejection
    /// rule allows one.
    pub replacement: Option<u32>,
    /// `states[i]` is the backend state after consuming `span.tokens[..=i]`.
    pub states: Vec<(TokenDistribution, HiddenState)>,
    /// Lambda at the first tested position, if any was tested.
    pub first_lambda: Option<f64>,
}

struct TimeAcc {
    passage: Duration,
    kv: Duration,
    lm: Duration,
    search: Duration,
}

impl TimeAcc {
    fn new() -> Self {
        Self {
            passage: Duration::ZERO,
            kv: Duration::ZERO,
            lm: Duration::ZERO,
            search: Duration::ZERO,
        }
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed();
    out
}

/// Test a proposed span position by position against the mixture
/// distribution.
///
/// The acceptance ratio at draft position `i` is
/// `p_m(token_i) / (gamma * max p_m)`, where the mixture is rebuilt at every
/// position from the batched hidden states (fresh neighbor search, fresh
/// lambda). Deterministic acceptance keeps the position while the ratio
/// exceeds 0.5; stochastic acceptance keeps it with probability
/// `min(1, ratio)`.
///
/// `first_token_exempt` marks drafts whose first token was itself selected
/// from the mixture (the initial proposal of a step): that position is
/// accepted without a test. Continuation drafts come straight from the
/// corpus, so their first position is tested like any other.
///
/// On rejection at position `i`, the accepted prefix is `i - 1` and a
/// replacement token (the mixture argmax at `i`) is re-selected only when
/// `i < len` and `len > 1`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_draft(
    pipeline: &Pipeline,
    kv: &TokenKv,
    ctx: &[u32],
    span: &DraftSpan,
    state_before: (&TokenDistribution, &HiddenState),
    first_token_exempt: bool,
    mask: &MaskState,
    cfg: &GenerationConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DraftEvaluation> {
    let mut acc = TimeAcc::new();
    let eval = evaluate_draft_timed(
        pipeline,
        kv,
        ctx,
        span,
        state_before,
        first_token_exempt,
        mask,
        cfg,
        rng.as_deref_mut(),
        &mut acc,
    )?;
    Ok(eval)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_draft_timed(
    pipeline: &Pipeline,
    kv: &TokenKv,
    ctx: &[u32],
    span: &DraftSpan,
    state_before: (&TokenDistribution, &HiddenState),
    first_token_exempt: bool,
    mask: &MaskState,
    cfg: &GenerationConfig,
    mut rng: Option<&mut ChaCha8Rng>,
    acc: &mut TimeAcc,
) -> Result<DraftEvaluation> {
    instrumentation::record_draft_evaluation();
    let len = span.tokens.len();
    debug_assert!(len >= 1);

    // One batched forward covers every draft position; the final state
    // doubles as the next step's state when the whole draft is accepted.
    let mut full = Vec::with_capacity(ctx.len() + len);
    full.extend_from_slice(ctx);
    full.extend_from_slice(&span.tokens);
    let states = timed(&mut acc.lm, || pipeline.backend.forward_tail(&full, len))?;

    let first_tested = if first_token_exempt { 2 } else { 1 };
    if first_tested > len {
        return Ok(DraftEvaluation {
            accepted: len,
            tested: 0,
            replacement: None,
            states,
            first_lambda: None,
        });
    }

    // Hidden states feeding each tested position's neighbor search.
    let queries: Vec<HiddenState> = (first_tested..=len)
        .map(|i| {
            if i == 1 {
                state_before.1.clone()
            } else {
                states[i - 2].1.clone()
            }
        })
        .collect();
    let neighbor_sets = timed(&mut acc.search, || {
        knn_search_batch(kv, &queries, pipeline.neighbors_r, mask)
    })?;

    let mut accepted = len;
    let mut tested = 0usize;
    let mut replacement = None;
    let mut first_lambda = None;
    for (j, i) in (first_tested..=len).enumerate() {
        let dist_before = if i == 1 { state_before.0 } else { &states[i - 2].0 };
        let p_knn = knn_distribution(&neighbor_sets[j], pipeline.mu)?;
        let lambda = rrc_lambda(&neighbor_sets[j], &pipeline.interp);
        if first_lambda.is_none() {
            first_lambda = Some(lambda);
        }
        let p_m = mix(dist_before, &p_knn, lambda)?;
        tested += 1;

        let token = span.tokens[i - 1];
        let ratio = p_m.prob(token) / (cfg.gamma * p_m.max_prob());
        let accept = match cfg.acceptance {
            Acceptance::Deterministic => ratio > 0.5,
            Acceptance::Stochastic => {
                let u: f64 = rng
                    .as_deref_mut()
                    .map(|r| r.gen::<f64>())
                    .unwrap_or(0.0);
                u < ratio.min(1.0)
            }
        };
        if !accept {
            accepted = i - 1;
            if i < len && len > 1 {
                replacement = Some(select_token(&p_m));
            }
            break;
        }
    }

    Ok(DraftEvaluation {
        accepted,
        tested,
        replacement,
        states,
        first_lambda,
    })
}

impl<'a> Pipeline<'a> {
    fn validate(&self, cfg: &GenerationConfig) -> Result<()> {
        cfg.validate()?;
        self.interp.validate()?;
        self.fusion.validate()?;
        if self.passages_b < 1 {
            return Err(NestError::config("passages-b", "must be >= 1"));
        }
        if self.neighbors_r < 1 {
            return Err(NestError::config("neighbors-r", "must be >= 1"));
        }
        if !(self.mu > 0.0) {
            return Err(NestError::config("mu", "must be > 0"));
        }
        if cfg.mode != Mode::Base && !self.store.is_empty() && self.embedder.dim != self.dense.dim()
        {
            return Err(NestError::DimensionMismatch {
                expected: self.dense.dim(),
                got: self.embedder.dim,
            });
        }
        Ok(())
    }

    /// First-stage retrieval over the prompt: both indexes, then fusion.
    pub fn retrieve(&self, prompt: &[u32]) -> Result<Vec<u32>> {
        let sparse_hits = self.sparse.search(prompt, self.fusion.retrieve_k);
        let query = self.embedder.embed(prompt);
        let dense_hits = self.dense.search(&query, self.fusion.retrieve_k)?;
        let fused = fuse(&dense_hits, &sparse_hits, &self.fusion, self.passages_b)?;
        Ok(fused.into_iter().map(|(id, _)| id).collect())
    }

    /// Run one generation. Retrieval happens once, on the prompt.
    pub fn generate(&self, prompt: &[u32], cfg: &GenerationConfig) -> Result<GenerationResult> {
        let start = Instant::now();
        self.validate(cfg)?;
        if prompt.is_empty() {
            return Err(NestError::config("prompt", "must be non-empty"));
        }
        let mut acc = TimeAcc::new();

        let retrieved = if cfg.mode == Mode::Base || self.store.is_empty() {
            Vec::new()
        } else {
            timed(&mut acc.passage, || self.retrieve(prompt))?
        };
        let kv = if retrieved.is_empty() {
            TokenKv::default()
        } else {
            timed(&mut acc.kv, || build_kv(self.store, &retrieved, self.backend))?
        };

        let mut ctx = Vec::with_capacity(1 + prompt.len() + cfg.max_new_tokens);
        ctx.push(tokenizer::BOS);
        ctx.extend_from_slice(prompt);

        let mut out: Vec<u32> = Vec::with_capacity(cfg.max_new_tokens);
        let mut attributions: Vec<AttributionRecord> = Vec::new();
        let mut steps: Vec<StepStat> = Vec::new();
        let mut mask = MaskState::new();
        let mut rng = match cfg.acceptance {
            Acceptance::Stochastic => Some(ChaCha8Rng::seed_from_u64(cfg.seed)),
            Acceptance::Deterministic => None,
        };

        let (mut dist, mut hidden) = timed(&mut acc.lm, || self.backend.forward(&ctx))?;

        'outer: while out.len() < cfg.max_new_tokens {
            let neighbors = if cfg.mode == Mode::Base || kv.is_empty() {
                NeighborSet::empty()
            } else {
                timed(&mut acc.search, || {
                    knn_search(&kv, &hidden, self.neighbors_r, &mask)
                })?
            };
            let (lambda, p_m) = if cfg.mode == Mode::Base {
                (1.0, dist.clone())
            } else {
                let p_knn = knn_distribution(&neighbors, self.mu)?;
                let lambda = rrc_lambda(&neighbors, &self.interp);
                (lambda, mix(&dist, &p_knn, lambda)?)
            };
            let token = select_token(&p_m);

            let span = if cfg.mode == Mode::Nest && lambda <= cfg.delta {
                select_span(token, &neighbors, self.store, cfg.ngram, &mask)?
            } else {
                None
            };

            match decide_output(lambda, cfg.delta, token, span) {
                Emit::Token(w) => {
                    if w == tokenizer::EOS {
                        break 'outer;
                    }
                    out.push(w);
                    ctx.push(w);
                    steps.push(StepStat {
                        proposed: 1,
                        accepted: 1,
                        emitted: 1,
                        lambda,
                        branch: StepBranch::Token,
                        replaced: false,
                    });
                    let next = timed(&mut acc.lm, || self.backend.forward(&ctx))?;
                    dist = next.0;
                    hidden = next.1;
                }
                Emit::Span(first_span) => {
                    let mut draft = first_span;
                    let mut exempt = true;
                    loop {
                        // Positions past the remaining budget can never be
                        // emitted; testing them would be wasted work.
                        let budget_now = cfg.max_new_tokens - out.len();
                        draft.tokens.truncate(budget_now);
                        debug_assert!(!draft.tokens.is_empty());
                        let eval = evaluate_draft_timed(
                            self,
                            &kv,
                            &ctx,
                            &draft,
                            (&dist, &hidden),
                            exempt,
                            &mask,
                            cfg,
                            rng.as_mut(),
                            &mut acc,
                        )?;
                        let budget = cfg.max_new_tokens - out.len();
                        let emit_n = eval.accepted.min(budget);
                        if emit_n > 0 {
                            let begin = out.len();
                            out.extend_from_slice(&draft.tokens[..emit_n]);
                            ctx.extend_from_slice(&draft.tokens[..emit_n]);
                            let doc_id = self
                                .store
                                .get(draft.passage_id)
                                .map(|p| p.doc_id.clone())
                                .unwrap_or_default();
                            attributions.push(AttributionRecord {
                                begin,
                                end: out.len(),
                                doc_id,
                                passage_id: draft.passage_id,
                                position: draft.start,
                            });
                            mask.mask_span(draft.passage_id, draft.start, emit_n);
                        }
                        let step_lambda = if exempt {
                            lambda
                        } else {
                            eval.first_lambda.unwrap_or(lambda)
                        };
                        steps.push(StepStat {
                            proposed: draft.tokens.len(),
                            accepted: eval.accepted,
                            emitted: emit_n,
                            lambda: step_lambda,
                            branch: if exempt { StepBranch::Span } else { StepBranch::Continuation },
                            replaced: false,
                        });

                        if emit_n < eval.accepted || out.len() >= cfg.max_new_tokens {
                            break 'outer; // budget exhausted
                        }

                        if eval.accepted == draft.tokens.len() {
                            // Fully accepted. Extend only when at least one
                            // position was actually tested; a vacuous accept
                            // (single-token initial draft) carries no
                            // evidence the source continues well.
                            let mut states = eval.states;
                            let (d, h) = states.pop().expect("state after full draft");
                            dist = d;
                            hidden = h;
                            if eval.tested > 0 {
                                if let Some(next_draft) = extend_continuation(
                                    self.store,
                                    &draft,
                                    eval.accepted,
                                    cfg.ngram,
                                    &mask,
                                )? {
                                    draft = next_draft;
                                    exempt = false;
                                    continue;
                                }
                            }
                            break;
                        }

                        // Rejection at position accepted + 1.
                        if let Some(repl) = eval.replacement {
                            if out.len() >= cfg.max_new_tokens {
                                break 'outer;
                            }
                            if repl == tokenizer::EOS {
                                break 'outer;
                            }
                            out.push(repl);
                            ctx.push(repl);
                            if let Some(stat) = steps.last_mut() {
                                stat.emitted += 1;
                                stat.replaced = true;
                            }
                            let next = timed(&mut acc.lm, || self.backend.forward(&ctx))?;
                            dist = next.0;
                            hidden = next.1;
                        } else if eval.accepted > 0 {
                            let (d, h) = eval
                                .states
                                .into_iter()
                                .nth(eval.accepted - 1)
                                .expect("state");
                            dist = d;
                            hidden = h;
                        }
                        // accepted == 0 without replacement: context is
                        // unchanged, current state still applies.
                        break;
                    }
                }
            }
        }

        let total = start.elapsed();
        let mut timings = Timings {
            passage_search_ms: acc.passage.as_secs_f64() * 1e3,
            kv_build_ms: acc.kv.as_secs_f64() * 1e3,
            lm_forward_ms: acc.lm.as_secs_f64() * 1e3,
            token_search_ms: acc.search.as_secs_f64() * 1e3,
            bookkeeping_ms: 0.0,
            total_ms: total.as_secs_f64() * 1e3,
        };
        timings.bookkeeping_ms = (timings.total_ms
            - timings.passage_search_ms
            - timings.kv_build_ms
            - timings.lm_forward_ms
            - timings.token_search_ms)
            .max(0.0);

        debug_assert_eq!(
            steps.iter().map(|s| s.emitted).sum::<usize>(),
            out.len(),
            "per-step emission accounting must cover the output"
        );

        Ok(GenerationResult {
            tokens: out,
            attributions,
            steps,
            timings,
        })
    }
}
