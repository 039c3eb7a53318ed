//! Probe feature extraction and cached feature stores.
//!
//! A store is written as two files sharing a stem: `<stem>.jsonl` (a header
//! line followed by one JSON record per row) and `<stem>.bin` (the feature
//! matrix in the binary container, magic `EMBF`, fields `[rows, dim]`).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedDoc;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{read_container, write_container};
use crate::model::{forward_full, LanguageModel, RepBundle};
use crate::propagation::{EntityTypeSet, Label};
use crate::span::{attn_column, in_window, SpanVariant};

pub const STORE_MAGIC: [u8; 4] = *b"EMBF";

/// Hidden state at tap `l`, position `i`.
pub fn hidden_at(bundle: &RepBundle, l: usize, i: usize) -> Result<Vec<f32>> {
    if l >= bundle.n_taps() || i >= bundle.seq_len() {
        return Err(Error::OutOfRange(format!(
            "tap {l} position {i} in bundle with {} taps and {} positions",
            bundle.n_taps(),
            bundle.seq_len()
        )));
    }
    Ok(bundle.hidden_row(l, i).to_vec())
}

/// Attention from `j` to `i` over all layers and heads.
pub fn attn_feature(bundle: &RepBundle, j: usize, i: usize) -> Result<Vec<f32>> {
    if i > j {
        return Err(Error::Causality { from: j, to: i });
    }
    if j >= bundle.seq_len() {
        return Err(Error::OutOfRange(format!("position {j} of {}", bundle.seq_len())));
    }
    Ok(attn_column(bundle.attn_rows(j), i))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Typing { layer: usize },
    Span { variant: SpanVariant, window: usize },
    Adjacency,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Typing { .. } => "typing",
            Task::Span { .. } => "span",
            Task::Adjacency => "adjacency",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSpec {
    pub task: Task,
    pub prompt_mask: bool,
    pub seed: u64,
    /// Span negatives per positive.
    pub neg_ratio: usize,
    /// Endpoint distance for hard span negatives.
    pub hard_radius: usize,
}

impl StoreSpec {
    pub fn new(task: Task) -> Self {
        StoreSpec { task, prompt_mask: true, seed: 0, neg_ratio: 10, hard_radius: 8 }
    }
}

/// One row. For typing `start == end` is the position; for adjacency the
/// pair is `(end - 1, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub doc: usize,
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub masked: bool,
}

/// Labelled design matrix for probe training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f32>,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    task: Task,
    split: SplitTag,
    dim: usize,
    n_classes: usize,
    rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub task: Task,
    pub split: SplitTag,
    pub dim: usize,
    pub n_classes: usize,
    pub records: Vec<Record>,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Rows usable for training: masked rows are dropped.
    pub fn trainable(&self) -> Dataset {
        self.select(|r| !r.masked)
    }

    pub fn all(&self) -> Dataset {
        self.select(|_| true)
    }

    fn select(&self, keep: impl Fn(&Record) -> bool) -> Dataset {
        let rows: Vec<usize> = (0..self.len()).filter(|&k| keep(&self.records[k])).collect();
        let mut x = Array2::<f32>::zeros((rows.len(), self.dim));
        for (r, &k) in rows.iter().enumerate() {
            x.row_mut(r).as_slice_mut().expect("contiguous").copy_from_slice(self.vector(k));
        }
        Dataset { x, y: rows.iter().map(|&k| self.records[k].label).collect(), n_classes: self.n_classes }
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("jsonl"), stem.with_extension("bin"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (index, matrix) = FeatureStore::paths(stem);
        let mut w = BufWriter::new(File::create(&index)?);
        let header = StoreHeader {
            task: self.task,
            split: self.split,
            dim: self.dim,
            n_classes: self.n_classes,
            rows: self.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        write_container(&matrix, STORE_MAGIC, &[self.len() as u64, self.dim as u64], &self.data)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (index, matrix) = FeatureStore::paths(stem);
        let mut lines = BufReader::new(File::open(&index)?).lines();
        let first = lines.next().ok_or_else(|| Error::Format { path: index.clone(), reason: "empty index".into() })??;
        let header: StoreHeader = serde_json::from_str(&first)?;
        let mut records = Vec::with_capacity(header.rows);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let (fields, data) = read_container(&matrix, STORE_MAGIC)?;
        if records.len() != header.rows || fields != [header.rows as u64, header.dim as u64] {
            return Err(Error::Format { path: index, reason: "index and matrix disagree".into() });
        }
        Ok(FeatureStore {
            task: header.task,
            split: header.split,
            dim: header.dim,
            n_classes: header.n_classes,
            records,
            data,
        })
    }
}

struct DocRows {
    records: Vec<Record>,
    data: Vec<f32>,
}

fn gold_membership(labels: &[Label]) -> Vec<Option<usize>> {
    // id of the gold mention covering each position
    let mut out = vec![None; labels.len()];
    for (k, s) in crate::propagation::decode_iob2(labels).iter().enumerate() {
        for m in &mut out[s.start..=s.end] {
            *m = Some(k);
        }
    }
    out
}

fn doc_rows(doc_idx: usize, doc: &AnnotatedDoc, labels: &[Label], bundle: &RepBundle, spec: &StoreSpec) -> DocRows {
    let n = labels.len();
    let masked = |start: usize| spec.prompt_mask && start < doc.prompt_len;
    let mut rows = DocRows { records: Vec::new(), data: Vec::new() };
    let push = |rows: &mut DocRows, start: usize, end: usize, label: usize, feat: &[f32]| {
        rows.records.push(Record { doc: doc_idx, start, end, label, masked: masked(start) });
        rows.data.extend_from_slice(feat);
    };
    match spec.task {
        Task::Typing { layer } => {
            for (i, l) in labels.iter().enumerate() {
                let h = bundle.hidden_row(layer, i);
                push(&mut rows, i, i, l.index(), h.as_slice().expect("contiguous row"));
            }
        }
        Task::Adjacency => {
            let member = gold_membership(labels);
            for j in 1..n {
                let same = member[j].is_some() && member[j] == member[j - 1];
                push(&mut rows, j - 1, j, usize::from(same), &attn_column(bundle.attn_rows(j), j - 1));
            }
        }
        Task::Span { variant, window } => {
            let eligible = |s: usize, e: usize| s <= e && in_window(s, e, window) && variant.feature_row(e) < n;
            let gold: BTreeSet<(usize, usize)> = crate::propagation::decode_iob2(labels)
                .iter()
                .map(|s| (s.start, s.end))
                .filter(|&(s, e)| eligible(s, e))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (doc_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let budget = spec.neg_ratio * gold.len().max(1);
            let r = spec.hard_radius;
            let mut hard = BTreeSet::new();
            for &(s, e) in &gold {
                for e2 in s..=(e + r).min(n.saturating_sub(1)) {
                    hard.insert((s, e2));
                }
                for s2 in s.saturating_sub(r)..=e {
                    hard.insert((s2, e));
                }
            }
            let mut hard: Vec<(usize, usize)> =
                hard.into_iter().filter(|&(s, e)| eligible(s, e) && !gold.contains(&(s, e))).collect();
            hard.shuffle(&mut rng);
            hard.truncate(budget);
            let mut negs: BTreeSet<(usize, usize)> = hard.into_iter().collect();
            let need = budget - negs.len();
            let pool = (0..n)
                .flat_map(|e| crate::span::candidate_starts(e, window).into_iter().map(move |s| (s, e)))
                .filter(|&(s, e)| eligible(s, e) && !gold.contains(&(s, e)) && !negs.contains(&(s, e)));
            negs.extend(pool.choose_multiple(&mut rng, need));
            let mut pairs: Vec<((usize, usize), usize)> =
                gold.iter().map(|&p| (p, 1)).chain(negs.into_iter().map(|p| (p, 0))).collect();
            pairs.sort_by_key(|&((s, e), _)| (e, s));
            for ((s, e), label) in pairs {
                let k = variant.feature_row(e);
                push(&mut rows, s, e, label, &attn_column(bundle.attn_rows(k), s));
            }
        }
    }
    rows
}

/// Encodes and runs each document once, then extracts rows for every spec.
pub fn build_feature_stores(
    docs: &[AnnotatedDoc],
    lm: &LanguageModel,
    types: &EntityTypeSet,
    specs: &[StoreSpec],
    split: SplitTag,
    exec: Exec,
) -> Result<Vec<FeatureStore>> {
    let cfg = lm.config();
    for s in specs {
        match s.task {
            Task::Typing { layer } if layer >= cfg.n_taps() => {
                return Err(Error::OutOfRange(format!("tap {layer} of {}", cfg.n_taps())));
            }
            Task::Span { variant: SpanVariant::Adjacency, .. } => {
                return Err(Error::InvalidPipeline("span store needs a span variant".into()));
            }
            _ => {}
        }
    }
    let indexed: Vec<(usize, &AnnotatedDoc)> = docs.iter().enumerate().collect();
    let per_doc = exec.try_map(&indexed, |&(k, doc)| -> Result<Vec<DocRows>> {
        let ids = lm.vocab.ids_strict(&doc.tokens)?;
        let labels = doc.parsed_labels(types)?;
        let bundle = forward_full(&lm.weights, &ids)?;
        Ok(specs.iter().map(|s| doc_rows(k, doc, &labels, &bundle, s)).collect())
    })?;
    let mut stores: Vec<FeatureStore> = specs
        .iter()
        .map(|s| {
            let (dim, n_classes) = match s.task {
                Task::Typing { .. } => (cfg.d_model, types.n_labels()),
                _ => (cfg.attn_dim(), 2),
            };
            FeatureStore { task: s.task, split, dim, n_classes, records: Vec::new(), data: Vec::new() }
        })
        .collect();
    for doc_rows in per_doc {
        for (store, rows) in stores.iter_mut().zip(doc_rows) {
            store.records.extend(rows.records);
            store.data.extend(rows.data);
        }
    }
    Ok(stores)
}

pub fn build_feature_store(
    docs: &[AnnotatedDoc],
    lm: &LanguageModel,
    types: &EntityTypeSet,
    spec: &StoreSpec,
    split: SplitTag,
    exec: Exec,
) -> Result<FeatureStore> {
    Ok(build_feature_stores(docs, lm, types, std::slice::from_ref(spec), split, exec)?.remove(0))
}
