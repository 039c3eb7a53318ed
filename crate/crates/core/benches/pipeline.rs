//! Sequential vs parallel execution of the batch stages, and streaming
//! annotation vs re-running the whole pipeline after every token.
//!
//! Weights are random: the bench measures cost, not accuracy.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamner::data::{synth_corpus, AnnotatedDoc, Gazetteer, SynthParams};
use streamner::eval::evaluate_pipeline;
use streamner::exec::Exec;
use streamner::features::{build_feature_stores, SplitTag, StoreSpec, Task};
use streamner::model::{init_model, DecodeParams, LanguageModel, ModelConfig};
use streamner::probe::{MlpProbe, ProbeSet};
use streamner::propagation::EntityTypeSet;
use streamner::span::SpanVariant;
use streamner::stream::{annotate_text, init_stream, step, PipelineConfig};

struct Fixture {
    lm: LanguageModel,
    probes: ProbeSet,
    types: EntityTypeSet,
    docs: Vec<AnnotatedDoc>,
    cfg: PipelineConfig,
}

fn fixture() -> Fixture {
    let g = Gazetteer::builtin();
    let vocab = g.vocab();
    let mc = ModelConfig { n_layers: 4, n_heads: 4, d_model: 64, d_ff: 256, vocab_size: vocab.len(), max_context: 256, seed: 1 };
    let lm = LanguageModel::new(init_model(&mc).expect("valid config"), vocab).expect("matching vocab");
    let types = g.types();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let probes = ProbeSet {
        vocab_fingerprint: lm.vocab.fingerprint(),
        layer: 3,
        span_variant: SpanVariant::SpanNext,
        typing: MlpProbe::init(mc.d_model, 64, types.n_labels(), &mut rng),
        span: Some(MlpProbe::init(mc.attn_dim(), 64, 2, &mut rng)),
        adjacency: Some(MlpProbe::init(mc.attn_dim(), 64, 2, &mut rng)),
        types: types.clone(),
    };
    let docs = synth_corpus(&g, &SynthParams { n_docs: 64, seed: 3, ..SynthParams::default() });
    let cfg = PipelineConfig { layer: 3, decode: DecodeParams { max_new_tokens: 64, ..DecodeParams::default() }, ..PipelineConfig::default() };
    Fixture { lm, probes, types, docs, cfg }
}

fn exec_modes(c: &mut Criterion) {
    let f = fixture();
    let specs = [
        StoreSpec::new(Task::Typing { layer: 3 }),
        StoreSpec::new(Task::Span { variant: SpanVariant::SpanNext, window: 16 }),
        StoreSpec::new(Task::Adjacency),
    ];
    let mut g = c.benchmark_group("feature_stores");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| build_feature_stores(&f.docs, &f.lm, &f.types, &specs, SplitTag::Train, exec).expect("builds"))
        });
    }
    g.finish();
    let mut g = c.benchmark_group("evaluate_pipeline");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| evaluate_pipeline(&f.docs, &f.lm, &f.probes, &f.types, &f.cfg, exec).expect("evaluates"))
        });
    }
    g.finish();
}

fn streaming_vs_rerun(c: &mut Criterion) {
    let f = fixture();
    let prompt = f.lm.vocab.ids_strict(&f.docs[0].tokens[..8]).expect("known pieces");
    let mut g = c.benchmark_group("annotate_while_generating_64");
    g.sample_size(10);
    g.bench_function("streaming", |b| {
        b.iter_batched(
            || init_stream(&f.lm, &f.probes, &f.types, &prompt, &f.cfg).expect("starts").0,
            |mut s| {
                while !s.is_finished() {
                    step(&f.lm, &f.probes, &mut s).expect("steps");
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
    g.bench_function("rerun", |b| {
        b.iter_batched(
            || init_stream(&f.lm, &f.probes, &f.types, &prompt, &f.cfg).expect("starts").0,
            |mut s| {
                while !s.is_finished() {
                    s.advance_plain(&f.lm).expect("steps");
                    annotate_text(&f.lm, &f.probes, s.tokens(), &f.cfg).expect("annotates");
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, exec_modes, streaming_vs_rerun);
criterion_main!(benches);
