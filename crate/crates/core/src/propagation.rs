//! IOB2 labels and the label-propagation strategies, in batch form and as an
//! incremental propagator that updates only the affected suffix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::argmax;
use crate::span::{resolve_overlaps, SpanScore};

pub type TypeId = usize;

/// Per-token tag. Class index layout: `O = 0`, `B-t = 1 + 2t`, `I-t = 2 + 2t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    O,
    B(TypeId),
    I(TypeId),
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::O => 0,
            Label::B(t) => 1 + 2 * t,
            Label::I(t) => 2 + 2 * t,
        }
    }

    pub fn from_index(i: usize) -> Label {
        match i {
            0 => Label::O,
            i if i % 2 == 1 => Label::B((i - 1) / 2),
            i => Label::I((i - 2) / 2),
        }
    }

    pub fn class(self) -> Option<TypeId> {
        match self {
            Label::O => None,
            Label::B(t) | Label::I(t) => Some(t),
        }
    }
}

pub fn n_labels(n_types: usize) -> usize {
    2 * n_types + 1
}

/// Ordered entity type names; `O` is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EntityTypeSet {
    names: Vec<String>,
}

impl TryFrom<Vec<String>> for EntityTypeSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        EntityTypeSet::new(names)
    }
}

impl From<EntityTypeSet> for Vec<String> {
    fn from(t: EntityTypeSet) -> Self {
        t.names
    }
}

impl EntityTypeSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidLabel("empty entity type set".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n == "O" || n.contains('-') || names[..i].contains(n) {
                return Err(Error::InvalidLabel(n.clone()));
            }
        }
        Ok(EntityTypeSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        n_labels(self.len())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, t: TypeId) -> &str {
        &self.names[t]
    }

    pub fn id(&self, name: &str) -> Option<TypeId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn label_name(&self, l: Label) -> String {
        match l {
            Label::O => "O".to_string(),
            Label::B(t) => format!("B-{}", self.names[t]),
            Label::I(t) => format!("I-{}", self.names[t]),
        }
    }

    pub fn parse_label(&self, s: &str) -> Result<Label> {
        if s == "O" {
            return Ok(Label::O);
        }
        let (prefix, name) = s.split_once('-').ok_or_else(|| Error::InvalidLabel(s.into()))?;
        let t = self.id(name).ok_or_else(|| Error::InvalidLabel(s.into()))?;
        match prefix {
            "B" => Ok(Label::B(t)),
            "I" => Ok(Label::I(t)),
            _ => Err(Error::InvalidLabel(s.into())),
        }
    }
}

/// Typed mention over `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub ty: TypeId,
    pub score: f32,
}

impl EntitySpan {
    pub fn key(&self) -> (usize, usize, TypeId) {
        (self.start, self.end, self.ty)
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.ty)
    }
}

/// Distribution over IOB2 labels for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenwisePrediction {
    pub probs: Vec<f32>,
}

impl TokenwisePrediction {
    pub fn new(probs: Vec<f32>) -> Self {
        TokenwisePrediction { probs }
    }

    /// Certain prediction of `label` (tests and fixtures).
    pub fn one_hot(label: Label, n_types: usize) -> Self {
        let mut probs = vec![0.0; n_labels(n_types)];
        probs[label.index()] = 1.0;
        TokenwisePrediction { probs }
    }

    pub fn label(&self) -> Label {
        Label::from_index(argmax(&self.probs))
    }

    /// Second most likely label; ties go to the lower index.
    pub fn runner_up(&self) -> Label {
        let best = argmax(&self.probs);
        let mut idx = usize::MAX;
        for (i, &p) in self.probs.iter().enumerate() {
            if i != best && (idx == usize::MAX || p > self.probs[idx]) {
                idx = i;
            }
        }
        Label::from_index(idx)
    }

    /// Probability mass on `B-t` and `I-t`.
    pub fn class_prob(&self, t: TypeId) -> f32 {
        self.probs[1 + 2 * t] + self.probs[2 + 2 * t]
    }

    /// Type from the argmax, falling back to the runner-up when argmax is `O`.
    pub fn forced_class(&self) -> TypeId {
        self.label()
            .class()
            .or_else(|| self.runner_up().class())
            .expect("runner-up differs from argmax, so one of them is not O")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Tokenwise,
    Adjacency,
    SpanwiseTyping,
    #[default]
    SpanwisePropagation,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Tokenwise, Strategy::Adjacency, Strategy::SpanwiseTyping, Strategy::SpanwisePropagation];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tokenwise => "tokenwise",
            Strategy::Adjacency => "adjacency",
            Strategy::SpanwiseTyping => "spanwise_typing",
            Strategy::SpanwisePropagation => "spanwise_propagation",
        }
    }

    pub fn needs_spans(self) -> bool {
        matches!(self, Strategy::SpanwiseTyping | Strategy::SpanwisePropagation)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Decodes IOB2 labels. An `I-t` that does not continue a `t` mention opens a
/// new one. Scores are 1.
pub fn decode_iob2(labels: &[Label]) -> Vec<EntitySpan> {
    decode_from(labels, 0)
}

fn decode_from(labels: &[Label], offset: usize) -> Vec<EntitySpan> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, TypeId)> = None;
    for (i, &l) in labels.iter().enumerate().skip(offset) {
        let cont = matches!((cur, l), (Some((_, ct)), Label::I(t)) if ct == t);
        if cont {
            continue;
        }
        if let Some((s, t)) = cur.take() {
            out.push(EntitySpan { start: s, end: i - 1, ty: t, score: 1.0 });
        }
        if let Some(t) = l.class() {
            cur = Some((i, t));
        }
    }
    if let Some((s, t)) = cur {
        out.push(EntitySpan { start: s, end: labels.len() - 1, ty: t, score: 1.0 });
    }
    out
}

pub fn encode_iob2(spans: &[EntitySpan], len: usize) -> Result<Vec<Label>> {
    let mut labels = vec![Label::O; len];
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| s.start);
    for (k, s) in sorted.iter().enumerate() {
        if s.start > s.end || s.end >= len {
            return Err(Error::OutOfRange(format!("span {s} in sequence of {len}")));
        }
        if k > 0 && sorted[k - 1].end >= s.start {
            return Err(Error::OverlappingSpans(format!("{} and {s}", sorted[k - 1])));
        }
        labels[s.start] = Label::B(s.ty);
        for l in &mut labels[s.start + 1..=s.end] {
            *l = Label::I(s.ty);
        }
    }
    Ok(labels)
}

fn rescore(mut spans: Vec<EntitySpan>, preds: &[TokenwisePrediction]) -> Vec<EntitySpan> {
    for s in &mut spans {
        s.score = preds[s.end].class_prob(s.ty);
    }
    spans
}

pub fn argmax_labels(preds: &[TokenwisePrediction]) -> Vec<Label> {
    preds.iter().map(TokenwisePrediction::label).collect()
}

pub fn tokenwise_only(preds: &[TokenwisePrediction]) -> Vec<EntitySpan> {
    rescore(decode_iob2(&argmax_labels(preds)), preds)
}

fn adjacency_label(base: Label, ty: Option<TypeId>, assigned: bool, linked: bool) -> Label {
    match ty {
        None => Label::O,
        Some(t) if linked => Label::I(t),
        Some(t) if assigned => Label::B(t),
        Some(t) => match base {
            Label::I(_) => Label::I(t),
            _ => Label::B(t),
        },
    }
}

/// `adj[i]` scores the pair `(i, i + 1)`; missing entries count as 0.
pub fn propagate_adjacency(preds: &[TokenwisePrediction], adj: &[f32], threshold: f32) -> Vec<EntitySpan> {
    let base = argmax_labels(preds);
    let n = base.len();
    let mut ty: Vec<Option<TypeId>> = base.iter().map(|l| l.class()).collect();
    let mut assigned = vec![false; n];
    let mut linked = vec![false; n];
    for i in (1..n).rev() {
        if ty[i].is_some() && adj.get(i - 1).copied().unwrap_or(0.0) > threshold {
            ty[i - 1] = ty[i];
            assigned[i - 1] = true;
            linked[i] = true;
        }
    }
    let labels: Vec<Label> = (0..n).map(|i| adjacency_label(base[i], ty[i], assigned[i], linked[i])).collect();
    rescore(decode_iob2(&labels), preds)
}

/// Each (already disjoint) span typed by its last token, with the runner-up
/// fallback when that token's argmax is `O`.
pub fn spanwise_typing(spans: &[SpanScore], preds: &[TokenwisePrediction]) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = spans
        .iter()
        .map(|s| EntitySpan { start: s.start, end: s.end, ty: preds[s.end].forced_class(), score: s.score })
        .collect();
    out.sort_by_key(|s| s.start);
    out
}

fn better(a: &SpanScore, b: &SpanScore) -> bool {
    a.score > b.score || (a.score == b.score && a.start < b.start)
}

fn best_by_end(n: usize, spans: &[SpanScore]) -> Vec<Option<SpanScore>> {
    let mut best: Vec<Option<SpanScore>> = vec![None; n];
    for s in spans.iter().filter(|s| s.start <= s.end && s.end < n) {
        match &best[s.end] {
            Some(b) if !better(s, b) => {}
            _ => best[s.end] = Some(*s),
        }
    }
    best
}

/// Right-to-left: a typed token with a detected span ending on it claims the
/// whole best span; claimed positions are skipped.
pub fn spanwise_propagation(preds: &[TokenwisePrediction], spans: &[SpanScore]) -> Vec<EntitySpan> {
    let best = best_by_end(preds.len(), spans);
    let mut out = Vec::new();
    let mut i = preds.len();
    while i > 0 {
        let e = i - 1;
        match (preds[e].label().class(), best[e]) {
            (Some(t), Some(s)) => {
                out.push(EntitySpan { start: s.start, end: e, ty: t, score: s.score });
                i = s.start;
            }
            _ => i -= 1,
        }
    }
    out.reverse();
    out
}

/// Accepted evidence for a whole sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evidence {
    /// `adjacency[i]` scores `(i, i + 1)`.
    pub adjacency: Vec<f32>,
    /// Spans above the span threshold.
    pub spans: Vec<SpanScore>,
}

pub fn propagate(
    strategy: Strategy,
    preds: &[TokenwisePrediction],
    evidence: &Evidence,
    adj_threshold: f32,
) -> Vec<EntitySpan> {
    match strategy {
        Strategy::Tokenwise => tokenwise_only(preds),
        Strategy::Adjacency => propagate_adjacency(preds, &evidence.adjacency, adj_threshold),
        Strategy::SpanwiseTyping => spanwise_typing(&resolve_overlaps(&evidence.spans), preds),
        Strategy::SpanwisePropagation => spanwise_propagation(preds, &evidence.spans),
    }
}

/// Entities leaving and entering the current set after one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diff {
    pub removed: Vec<EntitySpan>,
    pub added: Vec<EntitySpan>,
}

impl Diff {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }

    fn cancel_unchanged(mut self) -> Self {
        self.removed.retain(|r| {
            if let Some(k) = self.added.iter().position(|a| a == r) {
                self.added.remove(k);
                false
            } else {
                true
            }
        });
        self
    }
}

/// Applies one token at a time and keeps the entity set equal to what the
/// batch strategy would produce on the prefix seen so far.
#[derive(Clone, Debug)]
pub struct IncrementalPropagator {
    strategy: Strategy,
    adj_threshold: f32,
    preds: Vec<TokenwisePrediction>,
    base: Vec<Label>,
    adj: Vec<f32>,
    // adjacency scan state
    ty: Vec<Option<TypeId>>,
    assigned: Vec<bool>,
    labels: Vec<Label>,
    // spanwise propagation scan state
    best: Vec<Option<SpanScore>>,
    visited: Vec<bool>,
    // spanwise typing
    accepted: Vec<SpanScore>,
    entities: Vec<EntitySpan>,
    rescanned: usize,
}

impl IncrementalPropagator {
    pub fn new(strategy: Strategy, adj_threshold: f32) -> Self {
        IncrementalPropagator {
            strategy,
            adj_threshold,
            preds: Vec::new(),
            base: Vec::new(),
            adj: Vec::new(),
            ty: Vec::new(),
            assigned: Vec::new(),
            labels: Vec::new(),
            best: Vec::new(),
            visited: Vec::new(),
            accepted: Vec::new(),
            entities: Vec::new(),
            rescanned: 0,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn entities(&self) -> &[EntitySpan] {
        &self.entities
    }

    pub fn predictions(&self) -> &[TokenwisePrediction] {
        &self.preds
    }

    /// Positions revisited by the last update.
    pub fn last_rescan(&self) -> usize {
        self.rescanned
    }

    /// Adds position `p = len()`. `adj_left` scores `(p - 1, p)`; `spans` are
    /// the accepted spans that became known at this step (all ending at or
    /// before `p`, none seen before).
    pub fn push(&mut self, pred: TokenwisePrediction, adj_left: Option<f32>, spans: &[SpanScore]) -> Diff {
        let p = self.preds.len();
        self.base.push(pred.label());
        self.preds.push(pred);
        if p > 0 {
            self.adj.push(adj_left.unwrap_or(0.0));
        }
        debug_assert!(spans.iter().all(|s| s.start <= s.end && s.end <= p));
        match self.strategy {
            Strategy::Tokenwise => {
                self.labels.push(self.base[p]);
                self.rescanned = 1;
                self.splice_decode(p)
            }
            Strategy::Adjacency => self.push_adjacency(p),
            Strategy::SpanwiseTyping => self.push_spanwise_typing(spans),
            Strategy::SpanwisePropagation => self.push_spanwise_propagation(p, spans),
        }
    }

    fn push_adjacency(&mut self, p: usize) -> Diff {
        self.ty.push(self.base[p].class());
        self.assigned.push(false);
        // Rescan links right to left until a position below the new pair
        // ends up in the same state as before.
        let mut sync = None;
        let mut i = p;
        while i > 0 {
            let link = self.ty[i].is_some() && self.adj[i - 1] > self.adj_threshold;
            let state = if link { (self.ty[i], true) } else { (self.base[i - 1].class(), false) };
            if i < p && state == (self.ty[i - 1], self.assigned[i - 1]) {
                sync = Some(i - 1);
                break;
            }
            self.ty[i - 1] = state.0;
            self.assigned[i - 1] = state.1;
            i -= 1;
        }
        let lo = sync.map_or(0, |s| s + 1);
        self.rescanned = p + 1 - lo;
        let mut first_changed = p;
        for k in lo..=p {
            let linked = k > 0 && self.ty[k].is_some() && self.adj[k - 1] > self.adj_threshold;
            let l = adjacency_label(self.base[k], self.ty[k], self.assigned[k], linked);
            if k == p {
                self.labels.push(l);
            } else if self.labels[k] != l {
                self.labels[k] = l;
                first_changed = first_changed.min(k);
            }
        }
        self.splice_decode(first_changed)
    }

    /// Re-decodes labels from the mention touching `from - 1` onwards.
    fn splice_decode(&mut self, from: usize) -> Diff {
        let mut q = from;
        if from > 0 {
            if let Some(e) = self.entities.iter().rev().find(|e| e.start <= from - 1 && from - 1 <= e.end) {
                q = e.start;
            }
        }
        let keep = self.entities.partition_point(|e| e.end < q);
        let removed = self.entities.split_off(keep);
        let added = rescore(decode_from(&self.labels, q), &self.preds);
        self.entities.extend_from_slice(&added);
        Diff { removed, added }.cancel_unchanged()
    }

    fn push_spanwise_typing(&mut self, spans: &[SpanScore]) -> Diff {
        self.rescanned = 0;
        if spans.is_empty() {
            return Diff::default();
        }
        self.accepted.extend_from_slice(spans);
        self.rescanned = self.accepted.len();
        let next = spanwise_typing(&resolve_overlaps(&self.accepted), &self.preds);
        let removed = std::mem::replace(&mut self.entities, next);
        Diff { removed, added: self.entities.clone() }.cancel_unchanged()
    }

    fn push_spanwise_propagation(&mut self, p: usize, spans: &[SpanScore]) -> Diff {
        self.best.push(None);
        self.visited.push(false);
        let mut stable_below = p;
        for s in spans {
            stable_below = stable_below.min(s.end);
            match &self.best[s.end] {
                Some(b) if !better(s, b) => {}
                _ => self.best[s.end] = Some(*s),
            }
        }
        // Scan from the top until reaching a position with unchanged inputs
        // that both the old and the new scan stand on.
        let mut emitted = Vec::new();
        let mut sync = None;
        let mut i = p + 1;
        while i > 0 {
            let e = i - 1;
            if e < stable_below && self.visited[e] {
                sync = Some(e);
                break;
            }
            self.visited[e] = true;
            match (self.base[e].class(), self.best[e]) {
                (Some(t), Some(s)) => {
                    emitted.push(EntitySpan { start: s.start, end: e, ty: t, score: s.score });
                    for v in &mut self.visited[s.start..e] {
                        *v = false;
                    }
                    i = s.start;
                }
                _ => i -= 1,
            }
        }
        let keep = match sync {
            Some(m) => self.entities.partition_point(|x| x.end <= m),
            None => 0,
        };
        self.rescanned = p + 1 - sync.map_or(0, |m| m + 1);
        let removed = self.entities.split_off(keep);
        emitted.reverse();
        self.entities.extend_from_slice(&emitted);
        Diff { removed, added: emitted }.cancel_unchanged()
    }
}
