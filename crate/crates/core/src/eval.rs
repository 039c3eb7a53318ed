//! Exact-match span metrics, isolated mention-detection and typing scores,
//! the nearest-neighbour few-shot mode and the strategy comparison report.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedDoc;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{build_feature_stores, FeatureStore, SplitTag, StoreSpec, Task};
use crate::model::{forward_full, LanguageModel};
use crate::probe::Scorer;
use crate::propagation::{n_labels, EntitySpan, EntityTypeSet, Strategy, TokenwisePrediction};
use crate::stream::{score_all, PipelineConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Precision is 1 without predictions, recall is 1 without gold items.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1, tp, fp, fn_ }
    }
}

fn set_prf<K: Ord>(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>], key: impl Fn(&EntitySpan) -> K) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<K> = g.iter().map(&key).collect();
        let p: BTreeSet<K> = p.iter().map(&key).collect();
        let hit = g.intersection(&p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Exact `(start, end, type)` matching, micro-averaged over documents.
pub fn micro_prf(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<Prf> {
    set_prf(gold, pred, EntitySpan::key)
}

/// Type-blind `(start, end)` matching.
pub fn mention_detection_prf(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<Prf> {
    set_prf(gold, pred, |s| (s.start, s.end))
}

/// Each gold span is typed by the argmax label of its last token; an `O`
/// argmax is a miss.
pub fn entity_typing_accuracy(gold: &[Vec<EntitySpan>], preds: &[Vec<TokenwisePrediction>]) -> Result<Prf> {
    if gold.len() != preds.len() {
        return Err(Error::LengthMismatch(gold.len(), preds.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(preds) {
        for s in g {
            let pred = p
                .get(s.end)
                .ok_or_else(|| Error::OutOfRange(format!("span end {} in document of {}", s.end, p.len())))?;
            match pred.label().class() {
                Some(t) if t == s.ty => tp += 1,
                Some(_) => {
                    fp += 1;
                    fn_ += 1;
                }
                None => fn_ += 1,
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Layer used by the nearest-neighbour mode: two thirds into the network.
pub fn fewshot_layer(n_layers: usize) -> usize {
    2 * n_layers / 3
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Unit-normalised support vectors with their labels.
#[derive(Clone, Debug, Default)]
struct NnIndex {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl NnIndex {
    fn from_store(store: &FeatureStore) -> Self {
        let mut idx = NnIndex { dim: store.dim, ..Default::default() };
        for (r, rec) in store.records.iter().enumerate() {
            idx.data.extend(normalized(store.vector(r)));
            idx.labels.push(rec.label);
        }
        idx
    }

    /// Smallest cosine distance to a support vector of each class
    /// (`f32::INFINITY` for classes without support).
    fn class_distances(&self, query: &[f32], n_classes: usize) -> Vec<f32> {
        let q = normalized(query);
        let mut best = vec![f32::INFINITY; n_classes];
        for (row, &label) in self.data.chunks_exact(self.dim).zip(&self.labels) {
            let d = 1.0 - crate::kernels::dot(row, &q);
            if d < best[label] {
                best[label] = d;
            }
        }
        best
    }
}

/// Annotated examples and their cached features for nearest-neighbour
/// classification.
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub layer: usize,
    pub n_types: usize,
    pub temperature: f32,
    typing: NnIndex,
    span: NnIndex,
    adjacency: NnIndex,
}

impl SupportSet {
    pub fn build(
        docs: &[AnnotatedDoc],
        lm: &LanguageModel,
        types: &EntityTypeSet,
        cfg: &PipelineConfig,
        exec: Exec,
    ) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptySupport);
        }
        let layer = fewshot_layer(lm.config().n_layers);
        let specs = [
            StoreSpec { prompt_mask: false, ..StoreSpec::new(Task::Typing { layer }) },
            StoreSpec { prompt_mask: false, ..StoreSpec::new(Task::Span { variant: cfg.variant, window: cfg.window }) },
            StoreSpec { prompt_mask: false, ..StoreSpec::new(Task::Adjacency) },
        ];
        let stores = build_feature_stores(docs, lm, types, &specs, SplitTag::Train, exec)?;
        if stores[0].is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(SupportSet {
            layer,
            n_types: types.len(),
            temperature: 0.1,
            typing: NnIndex::from_store(&stores[0]),
            span: NnIndex::from_store(&stores[1]),
            adjacency: NnIndex::from_store(&stores[2]),
        })
    }

    /// Types with at least one labelled token in the support.
    pub fn covered_types(&self) -> BTreeSet<usize> {
        self.typing.labels.iter().filter_map(|&l| crate::propagation::Label::from_index(l).class()).collect()
    }

    fn binary(index: &NnIndex, f: &[f32]) -> f32 {
        let d = index.class_distances(f, 2);
        match (d[1].is_finite(), d[0].is_finite()) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            _ if d[0] + d[1] == 0.0 => 0.5,
            _ => d[0] / (d[0] + d[1]),
        }
    }
}

impl Scorer for SupportSet {
    /// Softmax of negative per-label nearest distances, so the argmax is the
    /// nearest neighbour's label.
    fn typing(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.typing.class_distances(hidden, n_labels(self.n_types));
        let best = d.iter().copied().fold(f32::INFINITY, f32::min);
        let mut p: Vec<f32> = d.iter().map(|&x| if x.is_finite() { (-(x - best) / self.temperature).exp() } else { 0.0 }).collect();
        let s: f32 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    }

    fn span(&self, feature: &[f32]) -> f32 {
        Self::binary(&self.span, feature)
    }

    fn adjacency(&self, feature: &[f32]) -> f32 {
        Self::binary(&self.adjacency, feature)
    }

    fn has_span(&self) -> bool {
        true
    }

    fn has_adjacency(&self) -> bool {
        true
    }
}

/// Annotates one token sequence with the support set at its own layer.
pub fn fewshot_nn(
    support: &SupportSet,
    lm: &LanguageModel,
    tokens: &[u32],
    cfg: &PipelineConfig,
) -> Result<Vec<EntitySpan>> {
    let cfg = PipelineConfig { layer: support.layer, ..cfg.clone() };
    crate::stream::annotate_text(lm, support, tokens, &cfg)
}

/// Documents covering every type at least `k` times, drawn in order.
pub fn sample_support(pool: &[AnnotatedDoc], types: &EntityTypeSet, k: usize) -> Result<Vec<AnnotatedDoc>> {
    let mut counts = vec![0usize; types.len()];
    let mut out = Vec::new();
    for doc in pool {
        if counts.iter().all(|&c| c >= k) {
            break;
        }
        let present: BTreeSet<usize> = doc.gold_spans(types)?.iter().map(|s| s.ty).collect();
        if present.iter().any(|&t| counts[t] < k) {
            present.iter().for_each(|&t| counts[t] += 1);
            out.push(doc.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotRow {
    pub k: usize,
    pub mean_f1: f64,
    pub episode_f1: Vec<f64>,
}

/// Repeated k-shot episodes: each episode shuffles the pool with its own
/// seed, draws a support for every `k` and scores the test documents.
pub fn fewshot_episodes(
    pool: &[AnnotatedDoc],
    test: &[AnnotatedDoc],
    lm: &LanguageModel,
    types: &EntityTypeSet,
    ks: &[usize],
    episodes: usize,
    seed: u64,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<FewshotRow>> {
    let tests: Vec<(Vec<u32>, Vec<EntitySpan>)> = test
        .iter()
        .map(|d| Ok((lm.vocab.ids_strict(&d.tokens)?, d.gold_spans(types)?)))
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<EntitySpan>> = tests.iter().map(|t| t.1.clone()).collect();
    let bundles = exec.try_map(&tests, |t| forward_full(&lm.weights, &t.0))?;
    let ep: Vec<u64> = (0..episodes as u64).collect();
    let per_episode = exec.try_map(&ep, |&e| -> Result<Vec<f64>> {
        let mut order = pool.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(e)));
        ks.iter()
            .map(|&k| {
                let support = SupportSet::build(&sample_support(&order, types, k)?, lm, types, cfg, Exec::Sequential)?;
                let run = PipelineConfig { layer: support.layer, ..cfg.clone() };
                let pred = bundles
                    .iter()
                    .map(|b| Ok(score_all(b, &support, &run)?.entities(run.strategy, run.adj_threshold)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(micro_prf(&gold, &pred)?.f1)
            })
            .collect()
    })?;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let episode_f1: Vec<f64> = per_episode.iter().map(|e| e[i]).collect();
            FewshotRow { k, mean_f1: episode_f1.iter().sum::<f64>() / episode_f1.len().max(1) as f64, episode_f1 }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub ner: Prf,
    pub md: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocDetail {
    pub gold: Vec<EntitySpan>,
    /// One entry per report row.
    pub pred: Vec<Vec<EntitySpan>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub rows: Vec<StrategyRow>,
    pub typing: Prf,
    pub docs: Vec<DocDetail>,
}

impl PipelineReport {
    pub fn row(&self, s: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "P", "R", "F1", "MD-P", "MD-R", "MD-F1"])?;
        for r in &self.rows {
            let f = |x: f64| format!("{x:.6}");
            w.write_record([
                r.strategy.name().to_string(),
                f(r.ner.precision),
                f(r.ner.recall),
                f(r.ner.f1),
                f(r.md.precision),
                f(r.md.recall),
                f(r.md.f1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<22}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n", "strategy", "P", "R", "F1", "MD-P", "MD-R", "MD-F1");
        for r in &self.rows {
            s += &format!(
                "{:<22}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}\n",
                r.strategy.name(),
                r.ner.precision,
                r.ner.recall,
                r.ner.f1,
                r.md.precision,
                r.md.recall,
                r.md.f1
            );
        }
        s
    }
}

/// Annotates every document once per strategy the scorer supports.
pub fn evaluate_pipeline(
    docs: &[AnnotatedDoc],
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    types: &EntityTypeSet,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<PipelineReport> {
    let strategies: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| match s {
            Strategy::Adjacency => scorer.has_adjacency(),
            s if s.needs_spans() => scorer.has_span(),
            _ => true,
        })
        .collect();
    let per_doc = exec.try_map(docs, |d| -> Result<(DocDetail, Vec<TokenwisePrediction>)> {
        let gold = d.gold_spans(types)?;
        if d.is_empty() {
            return Ok((DocDetail { gold, pred: vec![Vec::new(); strategies.len()] }, Vec::new()));
        }
        let bundle = forward_full(&lm.weights, &lm.vocab.ids_strict(&d.tokens)?)?;
        let scores = score_all(&bundle, scorer, cfg)?;
        let pred = strategies.iter().map(|&s| scores.entities(s, cfg.adj_threshold)).collect();
        Ok((DocDetail { gold, pred }, scores.preds))
    })?;
    let gold: Vec<Vec<EntitySpan>> = per_doc.iter().map(|(d, _)| d.gold.clone()).collect();
    let preds: Vec<Vec<TokenwisePrediction>> = per_doc.iter().map(|(_, p)| p.clone()).collect();
    let mut rows = Vec::with_capacity(strategies.len());
    for (k, &strategy) in strategies.iter().enumerate() {
        let pred: Vec<Vec<EntitySpan>> = per_doc.iter().map(|(d, _)| d.pred[k].clone()).collect();
        rows.push(StrategyRow { strategy, ner: micro_prf(&gold, &pred)?, md: mention_detection_prf(&gold, &pred)? });
    }
    Ok(PipelineReport { rows, typing: entity_typing_accuracy(&gold, &preds)?, docs: per_doc.into_iter().map(|(d, _)| d).collect() })
}
