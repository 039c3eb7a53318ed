//! Incremental generate-and-annotate loop and its batch counterpart.

use std::cell::Cell;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_full, greedy_pick, DecodeOutput, DecodeParams, KvCache, LanguageModel, RepBundle};
use crate::probe::Scorer;
use crate::propagation::{
    propagate, Diff, EntitySpan, EntityTypeSet, Evidence, IncrementalPropagator, Strategy, TokenwisePrediction,
};
use crate::span::{attn_column, spans_from_rows, SpanScore, SpanVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Tap used by the typing probe.
    pub layer: usize,
    pub variant: SpanVariant,
    pub strategy: Strategy,
    pub span_threshold: f32,
    pub adj_threshold: f32,
    pub window: usize,
    pub decode: DecodeParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            layer: 2,
            variant: SpanVariant::SpanNext,
            strategy: Strategy::SpanwisePropagation,
            span_threshold: 0.5,
            adj_threshold: 0.5,
            window: 16,
            decode: DecodeParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, lm: &LanguageModel, scorer: &dyn Scorer) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPipeline(m));
        if self.layer >= lm.config().n_taps() {
            return bad(format!("layer {} with {} taps", self.layer, lm.config().n_taps()));
        }
        for (name, t) in [("span", self.span_threshold), ("adjacency", self.adj_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} threshold {t} outside [0, 1]"));
            }
        }
        if self.strategy.needs_spans() {
            if self.variant == SpanVariant::Adjacency {
                return bad("spanwise strategies need span_last or span_next".into());
            }
            if !scorer.has_span() {
                return Err(Error::MissingProbe("span"));
            }
        }
        if self.strategy == Strategy::Adjacency && !scorer.has_adjacency() {
            return Err(Error::MissingProbe("adjacency"));
        }
        self.decode.validate()
    }
}

/// An entity as reported to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub ty: String,
    pub text: String,
    pub score: f32,
}

impl SpanRecord {
    pub fn new(s: &EntitySpan, pieces: &[String], types: &EntityTypeSet) -> Self {
        SpanRecord {
            start: s.start,
            end: s.end,
            ty: types.name(s.ty).to_string(),
            text: pieces[s.start..=s.end].join(" "),
            score: s.score,
        }
    }

    fn overlaps(&self, other: &SpanRecord) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

pub fn span_records(spans: &[EntitySpan], pieces: &[String], types: &EntityTypeSet) -> Vec<SpanRecord> {
    spans.iter().map(|s| SpanRecord::new(s, pieces, types)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retype {
    pub from: SpanRecord,
    pub to: SpanRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub id: u32,
    pub text: String,
}

/// Annotation change caused by one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// Position of the token in the sequence.
    pub step: usize,
    pub token: TokenInfo,
    /// IOB2 label of this token from the typing probe alone.
    pub tokenwise: String,
    pub added: Vec<SpanRecord>,
    pub retracted: Vec<SpanRecord>,
    /// A removed entity replaced by an overlapping new one.
    pub retyped: Vec<Retype>,
}

impl StreamEvent {
    pub fn is_quiet(&self) -> bool {
        self.added.is_empty() && self.retracted.is_empty() && self.retyped.is_empty()
    }
}

/// Applies events in order and returns the resulting entity set, sorted by
/// start.
pub fn fold_events<'a>(events: impl IntoIterator<Item = &'a StreamEvent>) -> Vec<SpanRecord> {
    let mut set: Vec<SpanRecord> = Vec::new();
    let remove = |set: &mut Vec<SpanRecord>, r: &SpanRecord| {
        if let Some(k) = set.iter().position(|s| s == r) {
            set.remove(k);
        }
    };
    for e in events {
        for r in &e.retracted {
            remove(&mut set, r);
        }
        for r in &e.retyped {
            remove(&mut set, &r.from);
        }
        set.extend(e.retyped.iter().map(|r| r.to.clone()));
        set.extend(e.added.iter().cloned());
    }
    set.sort_by_key(|s| (s.start, s.end));
    set
}

fn diff_to_event(diff: Diff, step: usize, token: TokenInfo, tokenwise: String, pieces: &[String], types: &EntityTypeSet) -> StreamEvent {
    let mut removed = span_records(&diff.removed, pieces, types);
    let mut added = span_records(&diff.added, pieces, types);
    let mut retyped = Vec::new();
    let mut k = 0;
    while k < removed.len() {
        if let Some(a) = added.iter().position(|a| a.overlaps(&removed[k])) {
            retyped.push(Retype { from: removed.remove(k), to: added.remove(a) });
        } else {
            k += 1;
        }
    }
    StreamEvent { step, token, tokenwise, added, retracted: removed, retyped }
}

/// Per-position probe outputs shared by the streaming and batch paths.
struct PositionScores {
    pred: TokenwisePrediction,
    adj_left: Option<f32>,
    spans: Vec<SpanScore>,
    calls: usize,
}

fn score_position(
    scorer: &dyn Scorer,
    cfg: &PipelineConfig,
    p: usize,
    hidden: &[f32],
    attn: ndarray::ArrayView3<'_, f32>,
) -> Result<PositionScores> {
    let calls = Cell::new(1);
    let pred = TokenwisePrediction::new(scorer.typing(hidden));
    let adj_left = if cfg.strategy == Strategy::Adjacency && p > 0 {
        calls.set(calls.get() + 1);
        Some(scorer.adjacency(&attn_column(attn, p - 1)))
    } else {
        None
    };
    let spans = if cfg.strategy.needs_spans() {
        spans_from_rows(attn, p, cfg.variant, cfg.span_threshold, cfg.window, |f| {
            calls.set(calls.get() + 1);
            scorer.span(f)
        })?
    } else {
        Vec::new()
    };
    Ok(PositionScores { pred, adj_left, spans, calls: calls.get() })
}

/// Live state of one annotated generation.
#[derive(Clone, Debug)]
pub struct StreamState {
    cfg: PipelineConfig,
    types: EntityTypeSet,
    cache: KvCache,
    tokens: Vec<u32>,
    pieces: Vec<String>,
    history: HashSet<u32>,
    prompt_len: usize,
    generated: usize,
    last_logits: Vec<f32>,
    propagator: IncrementalPropagator,
    last_probe_calls: usize,
    max_probe_calls: usize,
}

impl StreamState {
    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn generated(&self) -> usize {
        self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.generated >= self.cfg.decode.max_new_tokens
    }

    pub fn entities(&self) -> &[EntitySpan] {
        self.propagator.entities()
    }

    pub fn predictions(&self) -> &[TokenwisePrediction] {
        self.propagator.predictions()
    }

    /// Probe evaluations made for the most recent token.
    pub fn last_probe_calls(&self) -> usize {
        self.last_probe_calls
    }

    pub fn max_probe_calls(&self) -> usize {
        self.max_probe_calls
    }

    pub fn text(&self) -> String {
        self.pieces.join(" ")
    }

    /// Decodes the next greedy token without annotating it. Leaves the
    /// annotations behind the tokens, so the state only serves timing baselines.
    pub fn advance_plain(&mut self, lm: &LanguageModel) -> Result<u32> {
        if self.is_finished() {
            return Err(Error::StreamFinished);
        }
        let next = greedy_pick(&self.last_logits, &self.history, self.cfg.decode.repetition_penalty)?;
        let out = lm.weights.decode_step(&mut self.cache, next)?;
        self.tokens.push(next);
        self.history.insert(next);
        self.last_logits = out.logits;
        self.generated += 1;
        Ok(next)
    }

    fn feed(&mut self, lm: &LanguageModel, scorer: &dyn Scorer, token: u32) -> Result<StreamEvent> {
        let out: DecodeOutput = lm.weights.decode_step(&mut self.cache, token)?;
        let p = out.position;
        let hidden = out.hidden.row(self.cfg.layer);
        let scores = score_position(scorer, &self.cfg, p, hidden.as_slice().expect("contiguous"), out.attn.view())?;
        self.tokens.push(token);
        self.pieces.push(lm.vocab.piece(token).to_string());
        self.history.insert(token);
        self.last_logits = out.logits;
        self.last_probe_calls = scores.calls;
        self.max_probe_calls = self.max_probe_calls.max(scores.calls);
        let tokenwise = self.types.label_name(scores.pred.label());
        let diff = self.propagator.push(scores.pred, scores.adj_left, &scores.spans);
        let info = TokenInfo { id: token, text: self.pieces[p].clone() };
        Ok(diff_to_event(diff, p, info, tokenwise, &self.pieces, &self.types))
    }
}

/// Feeds the prompt through the incremental path one token at a time.
pub fn init_stream(
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    types: &EntityTypeSet,
    prompt: &[u32],
    cfg: &PipelineConfig,
) -> Result<(StreamState, Vec<StreamEvent>)> {
    cfg.validate(lm, scorer)?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    let total = prompt.len() + cfg.decode.max_new_tokens;
    if total > lm.config().max_context {
        return Err(Error::ContextOverflow { len: total, max: lm.config().max_context });
    }
    let mut state = StreamState {
        cfg: cfg.clone(),
        types: types.clone(),
        cache: KvCache::new(lm.config()),
        tokens: Vec::with_capacity(total),
        pieces: Vec::with_capacity(total),
        history: HashSet::new(),
        prompt_len: prompt.len(),
        generated: 0,
        last_logits: Vec::new(),
        propagator: IncrementalPropagator::new(cfg.strategy, cfg.adj_threshold),
        last_probe_calls: 0,
        max_probe_calls: 0,
    };
    let events = prompt.iter().map(|&t| state.feed(lm, scorer, t)).collect::<Result<Vec<_>>>()?;
    Ok((state, events))
}

/// Picks the next token greedily, decodes it and annotates it.
pub fn step(lm: &LanguageModel, scorer: &dyn Scorer, state: &mut StreamState) -> Result<StreamEvent> {
    if state.is_finished() {
        return Err(Error::StreamFinished);
    }
    let next = greedy_pick(&state.last_logits, &state.history, state.cfg.decode.repetition_penalty)?;
    let event = state.feed(lm, scorer, next)?;
    state.generated += 1;
    Ok(event)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamOutput {
    pub tokens: Vec<u32>,
    pub text: String,
    pub prompt_len: usize,
    pub entities: Vec<EntitySpan>,
    pub events: Vec<StreamEvent>,
    pub max_probe_calls: usize,
}

pub fn run_stream(
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    types: &EntityTypeSet,
    prompt: &[u32],
    cfg: &PipelineConfig,
) -> Result<StreamOutput> {
    let (mut state, mut events) = init_stream(lm, scorer, types, prompt, cfg)?;
    while !state.is_finished() {
        events.push(step(lm, scorer, &mut state)?);
    }
    Ok(StreamOutput {
        text: state.text(),
        prompt_len: state.prompt_len,
        entities: state.entities().to_vec(),
        max_probe_calls: state.max_probe_calls,
        tokens: state.tokens,
        events,
    })
}

/// Probe outputs for a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScores {
    pub preds: Vec<TokenwisePrediction>,
    pub evidence: Evidence,
}

impl SequenceScores {
    pub fn entities(&self, strategy: Strategy, adj_threshold: f32) -> Vec<EntitySpan> {
        propagate(strategy, &self.preds, &self.evidence, adj_threshold)
    }
}

/// Runs every probe the configured strategy needs over a full forward pass.
pub fn score_bundle(bundle: &RepBundle, scorer: &dyn Scorer, cfg: &PipelineConfig) -> Result<SequenceScores> {
    let n = bundle.seq_len();
    let mut preds = Vec::with_capacity(n);
    let mut evidence = Evidence::default();
    for p in 0..n {
        let h = bundle.hidden_row(cfg.layer, p);
        let s = score_position(scorer, cfg, p, h.as_slice().expect("contiguous"), bundle.attn_rows(p))?;
        preds.push(s.pred);
        evidence.adjacency.extend(s.adj_left);
        evidence.spans.extend(s.spans);
    }
    Ok(SequenceScores { preds, evidence })
}

/// Scores for all strategies at once (every available probe is run).
pub fn score_all(bundle: &RepBundle, scorer: &dyn Scorer, cfg: &PipelineConfig) -> Result<SequenceScores> {
    let mut spans_cfg = cfg.clone();
    spans_cfg.strategy = Strategy::SpanwisePropagation;
    let mut scores = if scorer.has_span() {
        score_bundle(bundle, scorer, &spans_cfg)?
    } else {
        spans_cfg.strategy = Strategy::Tokenwise;
        score_bundle(bundle, scorer, &spans_cfg)?
    };
    if scorer.has_adjacency() {
        scores.evidence.adjacency =
            (1..bundle.seq_len()).map(|j| scorer.adjacency(&attn_column(bundle.attn_rows(j), j - 1))).collect();
    }
    Ok(scores)
}

/// Non-streaming annotation: one forward pass, probes at every position,
/// one propagation.
pub fn annotate_text(
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    tokens: &[u32],
    cfg: &PipelineConfig,
) -> Result<Vec<EntitySpan>> {
    cfg.validate(lm, scorer)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let bundle = forward_full(&lm.weights, tokens)?;
    Ok(score_bundle(&bundle, scorer, cfg)?.entities(cfg.strategy, cfg.adj_threshold))
}
