//! Command-line surface. Every subcommand reads one optional config file
//! (JSON or TOML) and applies flag overrides on top.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use streamner::bench::{bench, BenchConfig};
use streamner::data::{read_jsonl, write_jsonl, AnnotatedDoc, DatasetManifest, Gazetteer, Splits};
use streamner::eval::{evaluate_pipeline, fewshot_episodes};
use streamner::exec::Exec;
use streamner::experiment::{build_corpus, distill_splits, train_lm, train_probes, ExperimentConfig, SpanSource};
use streamner::features::{build_feature_stores, SplitTag, StoreSpec, Task};
use streamner::model::LanguageModel;
use streamner::probe::{expand_grid, grid_search, sweep_layers, train_probe, ProbeSet, TrainConfig};
use streamner::propagation::Strategy;
use streamner::stream::{init_stream, step};

use crate::service::{self, Params, ServiceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub neurons: Vec<usize>,
    pub lrs: Vec<f32>,
    pub batches: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { neurons: vec![32, 1024, 4096], lrs: vec![5e-4, 1e-4, 5e-5], batches: vec![1024, 4096] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewshotConfig {
    pub ks: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig { ks: vec![1, 5, 10, 50], episodes: 20, seed: 0 }
    }
}

/// Contents of the config file. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root for corpus, model, probes and reports.
    pub workdir: PathBuf,
    /// Gazetteer JSON; the built-in one when absent.
    pub gazetteer: Option<PathBuf>,
    pub experiment: ExperimentConfig,
    pub grid: GridConfig,
    pub fewshot: FewshotConfig,
    pub bench: BenchConfig,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            workdir: PathBuf::from("artifacts"),
            gazetteer: None,
            experiment: ExperimentConfig::default(),
            grid: GridConfig::default(),
            fewshot: FewshotConfig::default(),
            bench: BenchConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl Config {
    /// Parses TOML for `.toml` files and JSON otherwise.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    fn data_dir(&self) -> PathBuf {
        self.workdir.join("data")
    }

    fn model_dir(&self) -> PathBuf {
        self.workdir.join("model")
    }

    fn probes_dir(&self) -> PathBuf {
        self.workdir.join("probes")
    }

    fn reports_dir(&self) -> PathBuf {
        self.workdir.join("reports")
    }
}

#[derive(Debug, Parser)]
#[command(name = "streamner", version, about = "Streaming NER by probing a language model during generation")]
pub struct Cli {
    /// Config file (JSON or TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `workdir`.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Overrides the execution mode.
    #[arg(long, global = true, value_enum)]
    pub exec: Option<ExecArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Exec {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Exec::Sequential,
            ExecArg::Parallel => Exec::Parallel,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic corpus and optionally its distilled generations.
    Datagen(DatagenArgs),
    /// Train the language model or probes.
    Train(TrainArgs),
    /// Train a typing probe per tap and compare them on dev.
    Sweep,
    /// Evaluate every propagation strategy on the test split.
    Eval(EvalArgs),
    /// Generate from a prompt and print one annotation event per line.
    Stream(StreamArgs),
    /// Time generation with and without annotation.
    Bench(BenchArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also continue each document with the model and label the result.
    #[arg(long)]
    pub distill: bool,
    /// Rebuild even if the corpus exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainTask {
    Lm,
    Typing,
    Span,
    Adjacency,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub task: TrainTask,
    /// Tap for the typing probe.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Search neuron counts, learning rates and batch sizes from the `grid` section.
    #[arg(long)]
    pub grid: bool,
    /// Retrain the model even if one exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Also run the nearest-neighbour few-shot episodes.
    #[arg(long)]
    pub fewshot: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Default, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub span_threshold: Option<f32>,
    #[arg(long)]
    pub adj_threshold: Option<f32>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub repetition_penalty: Option<f32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Tokenwise,
    Adjacency,
    SpanwiseTyping,
    SpanwisePropagation,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Tokenwise => Strategy::Tokenwise,
            StrategyArg::Adjacency => Strategy::Adjacency,
            StrategyArg::SpanwiseTyping => Strategy::SpanwiseTyping,
            StrategyArg::SpanwisePropagation => Strategy::SpanwisePropagation,
        }
    }
}

impl PipelineArgs {
    fn params(&self, max_new: Option<usize>) -> Params {
        Params {
            strategy: self.strategy.map(Into::into),
            span_threshold: self.span_threshold,
            adj_threshold: self.adj_threshold,
            window: self.window,
            max_new_tokens: max_new,
            repetition_penalty: self.repetition_penalty,
        }
    }
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated ascending lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    pub max_streams: Option<usize>,
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub probes_dir: Option<PathBuf>,
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(e) = cli.exec {
        cfg.experiment.exec = e.into();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Datagen(a) => datagen(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Sweep => sweep(&cfg),
        Command::Eval(a) => eval(&mut cfg, a),
        Command::Stream(a) => stream(&cfg, a),
        Command::Bench(a) => bench_cmd(&mut cfg, a),
        Command::Serve(a) => serve(&mut cfg, a),
    }
}

fn gazetteer(cfg: &Config) -> anyhow::Result<Gazetteer> {
    Ok(match &cfg.gazetteer {
        Some(p) => Gazetteer::load(p)?,
        None => Gazetteer::builtin(),
    })
}

fn write_splits(dir: &Path, prefix: &str, s: &Splits) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(format!("{prefix}train.jsonl")), &s.train)?;
    write_jsonl(&dir.join(format!("{prefix}dev.jsonl")), &s.dev)?;
    write_jsonl(&dir.join(format!("{prefix}test.jsonl")), &s.test)?;
    Ok(())
}

fn read_splits(dir: &Path, prefix: &str) -> anyhow::Result<Option<Splits>> {
    let path = |s: &str| dir.join(format!("{prefix}{s}.jsonl"));
    if !path("train").exists() {
        return Ok(None);
    }
    Ok(Some(Splits { train: read_jsonl(&path("train"))?, dev: read_jsonl(&path("dev"))?, test: read_jsonl(&path("test"))? }))
}

fn corpus(cfg: &Config, g: &Gazetteer, force: bool) -> anyhow::Result<Splits> {
    let dir = cfg.data_dir();
    if !force {
        if let Some(s) = read_splits(&dir, "")? {
            return Ok(s);
        }
    }
    let (splits, manifest): (Splits, DatasetManifest) = build_corpus(g, &cfg.experiment)?;
    write_splits(&dir, "", &splits)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    eprintln!(
        "corpus: {} / {} / {} documents in {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(splits)
}

fn model(cfg: &Config, g: &Gazetteer, train: &[AnnotatedDoc], force: bool) -> anyhow::Result<LanguageModel> {
    let dir = cfg.model_dir();
    if !force && dir.join("model.bin").exists() {
        return Ok(LanguageModel::load_dir(&dir)?);
    }
    let (lm, report) = train_lm(g, train, &cfg.experiment)?;
    lm.save_dir(&dir)?;
    std::fs::create_dir_all(cfg.reports_dir())?;
    report.write_csv(&cfg.reports_dir().join("lm_loss.csv"))?;
    eprintln!("model: final loss {:?}, saved to {}", report.step_losses.last(), dir.display());
    Ok(lm)
}

fn distilled(cfg: &Config, lm: &LanguageModel, g: &Gazetteer, splits: &Splits) -> anyhow::Result<Splits> {
    let dir = cfg.data_dir();
    if let Some(s) = read_splits(&dir, "distilled_")? {
        return Ok(s);
    }
    let d = distill_splits(lm, splits, g, &cfg.experiment)?;
    write_splits(&dir, "distilled_", &d)?;
    Ok(d)
}

fn datagen(cfg: &mut Config, a: DatagenArgs) -> anyhow::Result<()> {
    if let Some(n) = a.n_docs {
        cfg.experiment.synth.n_docs = n;
    }
    if let Some(s) = a.seed {
        cfg.experiment.synth.seed = s;
    }
    let g = gazetteer(cfg)?;
    let splits = corpus(cfg, &g, a.force)?;
    if a.distill {
        let lm = model(cfg, &g, &splits.train, false)?;
        let d = distilled(cfg, &lm, &g, &splits)?;
        eprintln!("distilled: {} / {} / {} documents", d.train.len(), d.dev.len(), d.test.len());
    }
    Ok(())
}

fn override_train(c: &mut TrainConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.lr = lr;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
}

fn span_docs<'a>(cfg: &Config, splits: &'a Splits, distilled: &'a Option<Splits>) -> (&'a [AnnotatedDoc], &'a [AnnotatedDoc]) {
    match (cfg.experiment.span_source, distilled) {
        (SpanSource::Generated, Some(d)) => (&d.train, &d.dev),
        _ => (&splits.train, &splits.dev),
    }
}

fn train(cfg: &mut Config, a: TrainArgs) -> anyhow::Result<()> {
    if let Some(l) = a.layer {
        cfg.experiment.pipeline.layer = l;
    }
    override_train(&mut cfg.experiment.typing, &a);
    override_train(&mut cfg.experiment.span, &a);
    override_train(&mut cfg.experiment.adjacency, &a);
    let g = gazetteer(cfg)?;
    let types = g.types();
    let splits = corpus(cfg, &g, false)?;
    let lm = model(cfg, &g, &splits.train, a.force && a.task == TrainTask::Lm)?;
    if a.task == TrainTask::Lm {
        return Ok(());
    }
    let dist = match cfg.experiment.span_source {
        SpanSource::Generated => Some(distilled(cfg, &lm, &g, &splits)?),
        SpanSource::Original => None,
    };
    let sd = span_docs(cfg, &splits, &dist);
    let reports = cfg.reports_dir();
    std::fs::create_dir_all(&reports)?;
    let exp = &cfg.experiment;
    let p = &exp.pipeline;
    if a.task == TrainTask::All {
        let (set, curves) = train_probes(&lm, &types, (&splits.train, &splits.dev), sd, exp)?;
        set.save_dir(&cfg.probes_dir())?;
        curves.typing.write_csv(&reports.join("typing_metrics.csv"))?;
        curves.span.write_csv(&reports.join("span_metrics.csv"))?;
        curves.adjacency.write_csv(&reports.join("adjacency_metrics.csv"))?;
        eprintln!(
            "probes saved to {}; best dev: typing {:.4}, span {:.4}, adjacency {:.4}",
            cfg.probes_dir().display(),
            curves.typing.best_dev,
            curves.span.best_dev,
            curves.adjacency.best_dev
        );
        return Ok(());
    }
    let (task, docs, tcfg) = match a.task {
        TrainTask::Typing => (Task::Typing { layer: p.layer }, (&splits.train[..], &splits.dev[..]), &exp.typing),
        TrainTask::Span => (Task::Span { variant: p.variant, window: p.window }, sd, &exp.span),
        _ => (Task::Adjacency, sd, &exp.adjacency),
    };
    if let Task::Typing { layer } = task {
        if layer >= lm.config().n_taps() {
            bail!("layer {layer} is outside the model's {} taps", lm.config().n_taps());
        }
    }
    let spec = [StoreSpec::new(task)];
    let tr = build_feature_stores(docs.0, &lm, &types, &spec, SplitTag::Train, exp.exec)?.remove(0).trainable();
    let dv = build_feature_stores(docs.1, &lm, &types, &spec, SplitTag::Dev, exp.exec)?.remove(0).trainable();
    let stem = match task {
        Task::Typing { layer } => format!("typing_l{layer}"),
        t => t.name().to_string(),
    };
    let dir = cfg.probes_dir();
    std::fs::create_dir_all(&dir)?;
    let (probe, best) = if a.grid {
        let grid = expand_grid(tcfg, &cfg.grid.neurons, &cfg.grid.lrs, &cfg.grid.batches);
        let res = grid_search(task.name(), p.layer, &tr, &dv, &grid, exp.exec)?;
        res.write_csv(&reports.join(format!("{stem}_grid.csv")))?;
        let best = res.rows[res.best_index].dev_metric;
        (res.best_probe, best)
    } else {
        let (probe, curve) = train_probe(&tr, &dv, tcfg)?;
        curve.write_csv(&reports.join(format!("{stem}_metrics.csv")))?;
        (probe, curve.best_dev)
    };
    let path = dir.join(format!("{stem}.bin"));
    probe.save(&path)?;
    eprintln!("{} probe saved to {}; best dev {best:.4}", task.name(), path.display());
    Ok(())
}

fn sweep(cfg: &Config) -> anyhow::Result<()> {
    let g = gazetteer(cfg)?;
    let splits = corpus(cfg, &g, false)?;
    let lm = model(cfg, &g, &splits.train, false)?;
    let res = sweep_layers(&splits.train, &splits.dev, &lm, &g.types(), &cfg.experiment.typing, cfg.experiment.exec)?;
    std::fs::create_dir_all(cfg.reports_dir())?;
    let mut out = String::from("layer,accuracy\n");
    for (l, s) in res.scores.iter().enumerate() {
        out += &format!("{l},{s}\n");
        println!("tap {l}: {s:.4}");
    }
    std::fs::write(cfg.reports_dir().join("sweep.csv"), out)?;
    println!("best tap: {}", res.best_layer);
    Ok(())
}

/// Loads the model and probe set, training whatever is missing.
fn artifacts(cfg: &Config) -> anyhow::Result<(Gazetteer, Splits, LanguageModel, ProbeSet)> {
    let g = gazetteer(cfg)?;
    let splits = corpus(cfg, &g, false)?;
    let lm = model(cfg, &g, &splits.train, false)?;
    let dir = cfg.probes_dir();
    let probes = if dir.join("probes.json").exists() {
        ProbeSet::load_dir(&dir)?
    } else {
        let dist = match cfg.experiment.span_source {
            SpanSource::Generated => Some(distilled(cfg, &lm, &g, &splits)?),
            SpanSource::Original => None,
        };
        let (set, _) = train_probes(&lm, &g.types(), (&splits.train, &splits.dev), span_docs(cfg, &splits, &dist), &cfg.experiment)?;
        set.save_dir(&dir)?;
        set
    };
    probes.check(&lm)?;
    Ok((g, splits, lm, probes))
}

fn eval(cfg: &mut Config, a: EvalArgs) -> anyhow::Result<()> {
    let (g, splits, lm, probes) = artifacts(cfg)?;
    let mut pc = a.pipeline.params(None).apply(&cfg.experiment.pipeline);
    pc.layer = probes.layer;
    pc.variant = probes.span_variant;
    let report = evaluate_pipeline(&splits.test, &lm, &probes, &g.types(), &pc, cfg.experiment.exec)?;
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    report.write_csv(&dir.join("eval.csv"))?;
    report.write_json(&dir.join("eval.json"))?;
    print!("{}", report.table());
    if a.fewshot {
        let f = &cfg.fewshot;
        let rows = fewshot_episodes(&splits.train, &splits.test, &lm, &g.types(), &f.ks, f.episodes, f.seed, &pc, cfg.experiment.exec)?;
        let mut out = String::from("k,mean_f1\n");
        for r in &rows {
            out += &format!("{},{}\n", r.k, r.mean_f1);
            println!("k={:<4} mean F1 {:.4}", r.k, r.mean_f1);
        }
        std::fs::write(dir.join("fewshot.csv"), out)?;
    }
    Ok(())
}

fn stream(cfg: &Config, a: StreamArgs) -> anyhow::Result<()> {
    let lm = LanguageModel::load_dir(&cfg.model_dir()).context("loading the model; run `train` first")?;
    let probes = ProbeSet::load_dir(&cfg.probes_dir()).context("loading probes; run `train` first")?;
    probes.check(&lm)?;
    let mut pc = a.pipeline.params(a.max_new).apply(&cfg.experiment.pipeline);
    pc.layer = probes.layer;
    pc.variant = probes.span_variant;
    let ids = lm.vocab.encode(&a.prompt);
    let (mut state, events) = init_stream(&lm, &probes, &probes.types, &ids, &pc)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for e in &events {
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    while !state.is_finished() {
        let e = step(&lm, &probes, &mut state)?;
        writeln!(out, "{}", serde_json::to_string(&e)?)?;
        out.flush()?;
    }
    Ok(())
}

fn bench_cmd(cfg: &mut Config, a: BenchArgs) -> anyhow::Result<()> {
    if let Some(l) = a.lengths {
        cfg.bench.lengths = l;
    }
    if let Some(r) = a.reps {
        cfg.bench.reps = r;
    }
    if let Some(s) = a.steps {
        cfg.bench.steps = s;
    }
    let (_, splits, lm, probes) = artifacts(cfg)?;
    let mut pc = cfg.experiment.pipeline.clone();
    pc.layer = probes.layer;
    pc.variant = probes.span_variant;
    let first = cfg.bench.lengths.first().copied().unwrap_or(0);
    let prompts: Vec<Vec<u32>> = splits
        .test
        .iter()
        .take(4)
        .map(|d| lm.vocab.ids_strict(&d.tokens[..d.len().min(first).min(8)]))
        .collect::<streamner::Result<_>>()?;
    let report = bench(&lm, &probes, &probes.types, &prompts, &pc, &cfg.bench)?;
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    report.write_csv(&dir.join("bench.csv"))?;
    std::fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.table());
    if !report.modes_agree {
        bail!("incremental and re-run annotation disagreed");
    }
    Ok(())
}

fn serve(cfg: &mut Config, a: ServeArgs) -> anyhow::Result<()> {
    let s = &mut cfg.service;
    if let Some(b) = a.bind {
        s.bind = b;
    }
    if let Some(m) = a.max_streams {
        s.max_streams = m;
    }
    // paths left at their defaults follow the workdir
    let d = ServiceConfig::default();
    if let Some(m) = a.model_dir {
        s.model_dir = m;
    } else if s.model_dir == d.model_dir {
        s.model_dir = cfg.workdir.join("model");
    }
    if let Some(p) = a.probes_dir {
        s.probes_dir = p;
    } else if s.probes_dir == d.probes_dir {
        s.probes_dir = cfg.workdir.join("probes");
    }
    if s.pipeline.is_none() {
        s.pipeline = Some(cfg.experiment.pipeline.clone());
    }
    for p in [&s.model_dir, &s.probes_dir] {
        if !p.exists() {
            bail!("{} does not exist; run `train` first", p.display());
        }
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(s))
}
