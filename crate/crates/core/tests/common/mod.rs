//! Brute-force references and random case generators shared by the property
//! and acceptance tests. The references enumerate candidates or recurse on
//! definitions instead of reusing the library's scans.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use streamner::propagation::{EntitySpan, Label, TokenwisePrediction};
use streamner::span::SpanScore;

pub type Key = (usize, usize, usize, f32);

pub fn keys(v: &[EntitySpan]) -> Vec<Key> {
    v.iter().map(|s| (s.start, s.end, s.ty, s.score)).collect()
}

fn label_from(i: usize) -> Label {
    if i == 0 {
        Label::O
    } else if i % 2 == 1 {
        Label::B((i - 1) / 2)
    } else {
        Label::I(i / 2 - 1)
    }
}

fn class(l: Label) -> Option<usize> {
    match l {
        Label::O => None,
        Label::B(t) | Label::I(t) => Some(t),
    }
}

/// Label indices ordered by descending probability, ties to the lower index.
fn ranked(p: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn top_label(p: &TokenwisePrediction) -> Label {
    label_from(ranked(&p.probs)[0])
}

fn forced_type(p: &TokenwisePrediction) -> usize {
    let r = ranked(&p.probs);
    class(label_from(r[0])).unwrap_or_else(|| class(label_from(r[1])).expect("second label is typed"))
}

fn type_prob(p: &TokenwisePrediction, t: usize) -> f32 {
    p.probs[1 + 2 * t] + p.probs[2 + 2 * t]
}

/// Every `(start, end, type)` that forms a maximal mention: the start opens
/// one (a `B`, or an `I` not continuing its type), the rest are `I` of the
/// same type, and the next token does not continue it.
pub fn decode_pairs(labels: &[Label], n_types: usize) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for s in 0..n {
        for e in s..n {
            for t in 0..n_types {
                let opens = match labels[s] {
                    Label::B(x) => x == t,
                    Label::I(x) => x == t && (s == 0 || class(labels[s - 1]) != Some(t)),
                    Label::O => false,
                };
                let inner = (s + 1..=e).all(|k| labels[k] == Label::I(t));
                let closed = e + 1 == n || labels[e + 1] != Label::I(t);
                if opens && inner && closed {
                    out.push((s, e, t));
                }
            }
        }
    }
    out.sort();
    out
}

fn with_scores(pairs: Vec<(usize, usize, usize)>, preds: &[TokenwisePrediction]) -> Vec<Key> {
    pairs.into_iter().map(|(s, e, t)| (s, e, t, type_prob(&preds[e], t))).collect()
}

pub fn tokenwise_ref(preds: &[TokenwisePrediction], n_types: usize) -> Vec<Key> {
    let labels: Vec<Label> = preds.iter().map(top_label).collect();
    with_scores(decode_pairs(&labels, n_types), preds)
}

/// `adj[i]` scores `(i, i + 1)`. A token takes the final type of its right
/// neighbour when that neighbour is typed and the link clears the threshold.
pub fn adjacency_ref(preds: &[TokenwisePrediction], adj: &[f32], thr: f32, n_types: usize) -> Vec<Key> {
    let n = preds.len();
    let base: Vec<Label> = preds.iter().map(top_label).collect();
    let link = |i: usize| adj.get(i).copied().unwrap_or(0.0) > thr;
    fn final_ty(i: usize, n: usize, base: &[Label], link: &dyn Fn(usize) -> bool) -> Option<usize> {
        if i + 1 < n && link(i) {
            if let Some(t) = final_ty(i + 1, n, base, link) {
                return Some(t);
            }
        }
        class(base[i])
    }
    let labels: Vec<Label> = (0..n)
        .map(|i| {
            let ty = final_ty(i, n, &base, &link);
            let linked = i > 0 && ty.is_some() && link(i - 1);
            let assigned = i + 1 < n && link(i) && final_ty(i + 1, n, &base, &link).is_some();
            match ty {
                None => Label::O,
                Some(t) if linked => Label::I(t),
                Some(t) if assigned => Label::B(t),
                Some(t) => match base[i] {
                    Label::I(_) => Label::I(t),
                    _ => Label::B(t),
                },
            }
        })
        .collect();
    with_scores(decode_pairs(&labels, n_types), preds)
}

fn outranks(a: &SpanScore, b: &SpanScore) -> bool {
    let la = a.end - a.start;
    let lb = b.end - b.start;
    a.score > b.score || (a.score == b.score && (la > lb || (la == lb && a.start < b.start)))
}

fn overlap(a: &SpanScore, b: &SpanScore) -> bool {
    a.start <= b.end && b.start <= a.end
}

/// The unique disjoint subset in which every excluded candidate overlaps a
/// kept one that outranks it, found by trying every subset. Candidates must
/// have distinct `(start, end)`.
pub fn stable_set_ref(cands: &[SpanScore]) -> Vec<SpanScore> {
    let m = cands.len();
    assert!(m <= 16, "subset search is exponential");
    let mut found: Option<Vec<SpanScore>> = None;
    for mask in 0u32..(1 << m) {
        let kept: Vec<&SpanScore> = (0..m).filter(|&k| mask >> k & 1 == 1).map(|k| &cands[k]).collect();
        let disjoint = kept.iter().enumerate().all(|(x, a)| kept[x + 1..].iter().all(|b| !overlap(a, b)));
        if !disjoint {
            continue;
        }
        let covered = (0..m)
            .filter(|&k| mask >> k & 1 == 0)
            .all(|k| kept.iter().any(|a| overlap(a, &cands[k]) && outranks(a, &cands[k])));
        if covered {
            assert!(found.is_none(), "stable set is unique");
            let mut v: Vec<SpanScore> = kept.into_iter().copied().collect();
            v.sort_by_key(|s| s.start);
            found = Some(v);
        }
    }
    found.expect("a stable set exists")
}

pub fn spanwise_typing_ref(spans: &[SpanScore], preds: &[TokenwisePrediction]) -> Vec<Key> {
    stable_set_ref(spans).iter().map(|s| (s.start, s.end, forced_type(&preds[s.end]), s.score)).collect()
}

/// Entities of the prefix `0..i`, defined right to left.
pub fn spanwise_propagation_ref(preds: &[TokenwisePrediction], spans: &[SpanScore]) -> Vec<Key> {
    fn best(spans: &[SpanScore], e: usize) -> Option<SpanScore> {
        let ending: Vec<&SpanScore> = spans.iter().filter(|s| s.end == e).collect();
        let top = ending.iter().map(|s| s.score).fold(f32::NEG_INFINITY, f32::max);
        ending.into_iter().filter(|s| s.score == top).min_by_key(|s| s.start).copied()
    }
    fn prefix(i: usize, preds: &[TokenwisePrediction], spans: &[SpanScore]) -> Vec<Key> {
        if i == 0 {
            return Vec::new();
        }
        let e = i - 1;
        match (class(top_label(&preds[e])), best(spans, e)) {
            (Some(t), Some(s)) => {
                let mut v = prefix(s.start, preds, spans);
                v.push((s.start, e, t, s.score));
                v
            }
            _ => prefix(e, preds, spans),
        }
    }
    prefix(preds.len(), preds, spans)
}

/// Random case for the propagation references.
#[derive(Clone, Debug)]
pub struct Case {
    pub n_types: usize,
    pub preds: Vec<TokenwisePrediction>,
    /// `adj[i]` scores `(i, i + 1)`.
    pub adj: Vec<f32>,
    pub spans: Vec<SpanScore>,
}

/// Coarse grids make ties likely.
pub fn random_case(rng: &mut impl Rng, max_len: usize, max_types: usize) -> Case {
    let n = rng.random_range(1..=max_len);
    let n_types = rng.random_range(1..=max_types);
    let preds = (0..n)
        .map(|_| {
            let w: Vec<f32> = (0..2 * n_types + 1).map(|_| rng.random_range(0..5) as f32).collect();
            let total: f32 = w.iter().sum();
            if total == 0.0 {
                let mut p = vec![0.0; w.len()];
                p[rng.random_range(0..w.len())] = 1.0;
                TokenwisePrediction::new(p)
            } else {
                TokenwisePrediction::new(w.iter().map(|x| x / total).collect())
            }
        })
        .collect();
    let adj = (0..n.saturating_sub(1)).map(|_| rng.random_range(0..5) as f32 / 4.0).collect();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|e| (0..=e).map(move |s| (s, e))).collect();
    pairs.shuffle(rng);
    let k = rng.random_range(0..=pairs.len().min(10));
    let spans = pairs[..k]
        .iter()
        .map(|&(start, end)| SpanScore { start, end, score: 0.5 + rng.random_range(1..5) as f32 / 8.0 })
        .collect();
    Case { n_types, preds, adj, spans }
}

/// Random label string where every `I-t` continues a `t` mention.
pub fn random_valid_labels(rng: &mut impl Rng, max_len: usize, n_types: usize) -> Vec<Label> {
    let n = rng.random_range(0..=max_len);
    let mut out: Vec<Label> = Vec::with_capacity(n);
    for _ in 0..n {
        let prev = out.last().copied().and_then(class);
        let l = match rng.random_range(0..3) {
            0 => Label::O,
            1 => Label::B(rng.random_range(0..n_types)),
            _ => match prev {
                Some(t) => Label::I(t),
                None => Label::B(rng.random_range(0..n_types)),
            },
        };
        out.push(l);
    }
    out
}

/// Every label string of exactly `len` tokens over `n_types` types.
pub fn all_label_strings(len: usize, n_types: usize) -> Vec<Vec<Label>> {
    let k = 2 * n_types + 1;
    (0..k.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let l = label_from(code % k);
                    code /= k;
                    l
                })
                .collect()
        })
        .collect()
}

/// Repair rule stated per token: an `I-t` that does not continue a `t`
/// mention opens one.
pub fn repair_ref(labels: &[Label]) -> Vec<Label> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| match l {
            Label::I(t) if i == 0 || class(labels[i - 1]) != Some(t) => Label::B(t),
            l => l,
        })
        .collect()
}
