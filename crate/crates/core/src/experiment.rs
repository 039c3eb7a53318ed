//! End-to-end recipe: synthetic corpus, toy LM, distilled generations and
//! trained probes.

use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, distill_generate, prompt_from, AnnotatedDoc, DatasetManifest, Gazetteer, Splits, SynthParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{build_feature_stores, FeatureStore, SplitTag, StoreSpec, Task};
use crate::model::{init_model, train_toy_lm, DecodeParams, LanguageModel, LmSchedule, LmTrainReport, ModelConfig};
use crate::probe::{train_probe, MlpProbe, ProbeSet, TrainConfig, TrainCurve};
use crate::propagation::EntityTypeSet;
use crate::stream::PipelineConfig;

/// Model shape; the vocabulary size comes from the gazetteer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { n_layers: 4, n_heads: 4, d_model: 128, d_ff: 512, max_context: 512, seed: 0 }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_context: self.max_context,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Leading sentences of each source document used as the prompt.
    pub prompt_sentences: usize,
    pub decode: DecodeParams,
    /// Source documents drawn from the start of each split.
    pub max_train: usize,
    pub max_dev: usize,
    pub max_test: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            prompt_sentences: 1,
            decode: DecodeParams { max_new_tokens: 40, ..DecodeParams::default() },
            max_train: 600,
            max_dev: 100,
            max_test: 100,
        }
    }
}

/// Which text the span and adjacency probes learn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSource {
    #[default]
    Original,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelShape,
    pub lm: LmSchedule,
    pub synth: SynthParams,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub distill: DistillConfig,
    pub typing: TrainConfig,
    pub span: TrainConfig,
    pub adjacency: TrainConfig,
    pub span_source: SpanSource,
    pub pipeline: PipelineConfig,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelShape { n_heads: 16, ..ModelShape::default() },
            lm: LmSchedule { steps: 1200, ..LmSchedule::default() },
            synth: SynthParams { n_docs: 6000, ..SynthParams::default() },
            ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
            distill: DistillConfig::default(),
            typing: TrainConfig { lr: 5e-4, ..TrainConfig::typing() },
            span: TrainConfig { lr: 5e-4, ..TrainConfig::span() },
            adjacency: TrainConfig { lr: 5e-4, ..TrainConfig::span() },
            span_source: SpanSource::Original,
            pipeline: PipelineConfig { layer: 4, ..PipelineConfig::default() },
            exec: Exec::Parallel,
        }
    }
}

/// Encodes documents for LM training.
pub fn encode_docs(lm_vocab: &crate::tokenizer::Vocab, docs: &[AnnotatedDoc]) -> Result<Vec<Vec<u32>>> {
    docs.iter().map(|d| lm_vocab.ids_strict(&d.tokens)).collect()
}

pub fn build_corpus(g: &Gazetteer, cfg: &ExperimentConfig) -> Result<(Splits, DatasetManifest)> {
    build_dataset(g, &cfg.synth, cfg.ratios, cfg.split_seed)
}

/// Trains the toy LM on the training split.
pub fn train_lm(g: &Gazetteer, train: &[AnnotatedDoc], cfg: &ExperimentConfig) -> Result<(LanguageModel, LmTrainReport)> {
    let vocab = g.vocab();
    let init = init_model(&cfg.model.config(vocab.len()))?;
    let corpus = encode_docs(&vocab, train)?;
    let schedule = LmSchedule { exec: cfg.exec, ..cfg.lm.clone() };
    let (weights, report) = train_toy_lm(&init, &corpus, &schedule)?;
    Ok((LanguageModel::new(weights, vocab)?, report))
}

/// Continues the leading sentences of each split's documents and labels the
/// result with the lexicon teacher.
pub fn distill_splits(lm: &LanguageModel, splits: &Splits, g: &Gazetteer, cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.distill;
    let run = |docs: &[AnnotatedDoc], max: usize| -> Result<Vec<AnnotatedDoc>> {
        let prompts: Vec<AnnotatedDoc> = docs.iter().take(max).map(|doc| prompt_from(doc, d.prompt_sentences)).collect();
        distill_generate(lm, &prompts, &d.decode, g, cfg.exec)
    };
    Ok(Splits {
        train: run(&splits.train, d.max_train)?,
        dev: run(&splits.dev, d.max_dev)?,
        test: run(&splits.test, d.max_test)?,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProbeCurves {
    pub typing: TrainCurve,
    pub span: TrainCurve,
    pub adjacency: TrainCurve,
}

fn stores(
    docs: &[AnnotatedDoc],
    lm: &LanguageModel,
    types: &EntityTypeSet,
    specs: &[StoreSpec],
    split: SplitTag,
    exec: Exec,
) -> Result<Vec<FeatureStore>> {
    build_feature_stores(docs, lm, types, specs, split, exec)
}

/// Trains a span probe on one set of documents.
pub fn train_span_probe(
    lm: &LanguageModel,
    types: &EntityTypeSet,
    train: &[AnnotatedDoc],
    dev: &[AnnotatedDoc],
    pipeline: &PipelineConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(MlpProbe, TrainCurve)> {
    let spec = StoreSpec::new(Task::Span { variant: pipeline.variant, window: pipeline.window });
    let tr = stores(train, lm, types, std::slice::from_ref(&spec), SplitTag::Train, exec)?.remove(0);
    let dv = stores(dev, lm, types, std::slice::from_ref(&spec), SplitTag::Dev, exec)?.remove(0);
    train_probe(&tr.trainable(), &dv.trainable(), cfg)
}

/// Typing probe from `typing_docs`, span and adjacency probes from
/// `span_docs`. Training jobs run side by side under `Exec::Parallel`.
pub fn train_probes(
    lm: &LanguageModel,
    types: &EntityTypeSet,
    typing_docs: (&[AnnotatedDoc], &[AnnotatedDoc]),
    span_docs: (&[AnnotatedDoc], &[AnnotatedDoc]),
    cfg: &ExperimentConfig,
) -> Result<(ProbeSet, ProbeCurves)> {
    let p = &cfg.pipeline;
    if p.layer >= lm.config().n_taps() {
        return Err(Error::InvalidPipeline(format!("layer {} with {} taps", p.layer, lm.config().n_taps())));
    }
    let typing_spec = [StoreSpec::new(Task::Typing { layer: p.layer })];
    let span_specs = [
        StoreSpec::new(Task::Span { variant: p.variant, window: p.window }),
        StoreSpec::new(Task::Adjacency),
    ];
    let t_train = stores(typing_docs.0, lm, types, &typing_spec, SplitTag::Train, cfg.exec)?;
    let t_dev = stores(typing_docs.1, lm, types, &typing_spec, SplitTag::Dev, cfg.exec)?;
    let s_train = stores(span_docs.0, lm, types, &span_specs, SplitTag::Train, cfg.exec)?;
    let s_dev = stores(span_docs.1, lm, types, &span_specs, SplitTag::Dev, cfg.exec)?;
    let jobs = [
        (t_train[0].trainable(), t_dev[0].trainable(), cfg.typing.clone()),
        (s_train[0].trainable(), s_dev[0].trainable(), cfg.span.clone()),
        (s_train[1].trainable(), s_dev[1].trainable(), cfg.adjacency.clone()),
    ];
    let mut trained = cfg.exec.try_map(&jobs, |(tr, dv, c)| train_probe(tr, dv, c))?.into_iter();
    let (typing, tc) = trained.next().expect("three jobs");
    let (span, sc) = trained.next().expect("three jobs");
    let (adjacency, ac) = trained.next().expect("three jobs");
    let set = ProbeSet {
        types: types.clone(),
        layer: p.layer,
        span_variant: p.variant,
        vocab_fingerprint: lm.vocab.fingerprint(),
        typing,
        span: Some(span),
        adjacency: Some(adjacency),
    };
    Ok((set, ProbeCurves { typing: tc, span: sc, adjacency: ac }))
}

/// Everything produced by [`run_experiment`].
pub struct Experiment {
    pub gazetteer: Gazetteer,
    pub types: EntityTypeSet,
    pub splits: Splits,
    pub manifest: DatasetManifest,
    pub lm: LanguageModel,
    pub lm_report: LmTrainReport,
    pub distilled: Splits,
    pub probes: ProbeSet,
    pub curves: ProbeCurves,
}

pub fn run_experiment(g: &Gazetteer, cfg: &ExperimentConfig) -> Result<Experiment> {
    let types = g.types();
    let (splits, manifest) = build_corpus(g, cfg)?;
    log::info!("corpus: {} / {} / {} documents", splits.train.len(), splits.dev.len(), splits.test.len());
    let (lm, lm_report) = train_lm(g, &splits.train, cfg)?;
    log::info!("lm trained, final loss {:?}", lm_report.step_losses.last());
    let distilled = match cfg.span_source {
        SpanSource::Generated => distill_splits(&lm, &splits, g, cfg)?,
        SpanSource::Original => Splits::default(),
    };
    let span_docs = match cfg.span_source {
        SpanSource::Original => (&splits.train[..], &splits.dev[..]),
        SpanSource::Generated => (&distilled.train[..], &distilled.dev[..]),
    };
    let (probes, curves) = train_probes(&lm, &types, (&splits.train, &splits.dev), span_docs, cfg)?;
    Ok(Experiment { gazetteer: g.clone(), types, splits, manifest, lm, lm_report, distilled, probes, curves })
}
