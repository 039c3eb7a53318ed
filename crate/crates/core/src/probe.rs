//! Single-hidden-layer MLP probes, their trainer, layer sweeps and grid
//! search.

use std::fmt::Debug;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedDoc;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{build_feature_stores, Dataset, SplitTag, StoreSpec, Task};
use crate::io::{read_container, write_container, PROBE_MAGIC};
use crate::kernels::{argmax, matvec, softmax_in_place};
use crate::model::LanguageModel;
use crate::propagation::EntityTypeSet;
use crate::span::SpanVariant;

pub trait Real: Float + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// `x -> softmax(W2 relu(W1 z + b1) + b2)` with `z = (x - shift) * scale`,
/// weights row-major `[out][in]`. `shift` and `scale` are fixed before
/// training and are not optimised.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub shift: Array1<T>,
    pub scale: Array1<T>,
}

pub type MlpProbe = Mlp<f32>;

/// ReLU that lets NaN through.
fn relu<T: Float>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

fn softmax_rows<T: Real>(logits: &mut Array2<T>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Real> Mlp<T> {
    pub fn zeros(in_dim: usize, hidden: usize, out: usize) -> Self {
        Mlp {
            w1: Array2::zeros((hidden, in_dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((out, hidden)),
            b2: Array1::zeros(out),
            shift: Array1::zeros(in_dim),
            scale: Array1::ones(in_dim),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(in_dim: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        let mut m = Mlp::zeros(in_dim, hidden, out);
        let a1 = 1.0 / (in_dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        m.w1.mapv_inplace(|_| T::from(rng.random_range(-a1..a1)).expect("finite"));
        m.w2.mapv_inplace(|_| T::from(rng.random_range(-a2..a2)).expect("finite"));
        m
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.nrows()
    }

    /// Sets `shift` and `scale` to standardise the columns of `x`; columns
    /// with no spread are only centred.
    pub fn fit_input_norm(&mut self, x: ArrayView2<'_, T>) {
        let n = T::from(x.nrows().max(1)).expect("row count");
        for (c, col) in x.columns().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let sd = var.sqrt();
            self.shift[c] = mean;
            self.scale[c] = if sd > T::from(1e-6).expect("const") { T::one() / sd } else { T::one() };
        }
    }

    fn normalize(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        (&x - &self.shift) * &self.scale
    }

    fn pre_activation(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.normalize(x).dot(&self.w1.t()) + &self.b1
    }

    pub fn probs(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let h = self.pre_activation(x).mapv(relu);
        let mut logits = h.dot(&self.w2.t()) + &self.b2;
        softmax_rows(&mut logits);
        logits
    }

    /// Mean cross-entropy.
    pub fn loss(&self, x: ArrayView2<'_, T>, y: &[usize]) -> T {
        self.loss_and_grad(x, y).0
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, T>, y: &[usize]) -> (T, Mlp<T>) {
        let n = T::from(x.nrows()).expect("row count");
        let z = self.normalize(x);
        let pre = z.dot(&self.w1.t()) + &self.b1;
        let h = pre.mapv(relu);
        let mut p = h.dot(&self.w2.t()) + &self.b2;
        softmax_rows(&mut p);
        let mut loss = T::zero();
        for (r, &label) in y.iter().enumerate() {
            let pl = p[[r, label]];
            // keep NaN visible to the caller
            loss = loss - if pl.is_nan() { pl } else { pl.max(T::min_positive_value()).ln() };
            p[[r, label]] = p[[r, label]] - T::one();
        }
        let dlogits = p / n;
        let dw2 = dlogits.t().dot(&h);
        let db2 = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&self.w2);
        dpre.zip_mut_with(&pre, |g, &z| {
            if z <= T::zero() {
                *g = T::zero();
            }
        });
        let dw1 = dpre.t().dot(&z);
        let db1 = dpre.sum_axis(Axis(0));
        let grad = Mlp { w1: dw1, b1: db1, w2: dw2, b2: db2, shift: self.shift.clone(), scale: self.scale.clone() };
        (loss / n, grad)
    }

    fn params_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    fn params(&self) -> [&[T]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

/// Relative error `|g - n| / (|g| + |n|)` between the analytic gradient and
/// central finite differences with step `h`, over all parameters.
pub fn gradient_check(m: &Mlp<f64>, x: ArrayView2<'_, f64>, y: &[usize], h: f64) -> f64 {
    let (_, analytic) = m.loss_and_grad(x, y);
    let mut probe = m.clone();
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..4 {
        for i in 0..probe.params()[k].len() {
            let orig = probe.params()[k][i];
            probe.params_mut()[k][i] = orig + h;
            let up = probe.loss(x, y);
            probe.params_mut()[k][i] = orig - h;
            let down = probe.loss(x, y);
            probe.params_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.params()[k][i];
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
    }
    let denom = a_norm.sqrt() + n_norm.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Probability vector over a probe's classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f32>,
}

impl ClassDistribution {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl MlpProbe {
    /// Single-row forward pass. Streaming and batch annotation both go
    /// through here so their outputs agree bit for bit.
    pub fn probs_row(&self, x: &[f32]) -> Vec<f32> {
        let z: Vec<f32> = x.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect();
        let mut h = vec![0.0; self.hidden()];
        matvec(self.w1.as_slice().expect("layout"), self.b1.as_slice().expect("layout"), &z, &mut h);
        for v in &mut h {
            *v = relu(*v);
        }
        let mut out = vec![0.0; self.n_classes()];
        matvec(self.w2.as_slice().expect("layout"), self.b2.as_slice().expect("layout"), &h, &mut out);
        softmax_in_place(&mut out);
        out
    }

    pub fn predict(&self, x: &[f32]) -> Result<ClassDistribution> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        Ok(ClassDistribution { probs: self.probs_row(x) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        for p in self.params() {
            payload.extend_from_slice(p);
        }
        payload.extend(self.shift.iter().chain(&self.scale));
        let fields = [self.in_dim() as u64, self.hidden() as u64, self.n_classes() as u64];
        write_container(path, PROBE_MAGIC, &fields, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (fields, payload) = read_container(path, PROBE_MAGIC)?;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let [i, h, o] = <[u64; 3]>::try_from(fields).map_err(|_| bad("expected 3 header fields"))?;
        let mut m = MlpProbe::zeros(i as usize, h as usize, o as usize);
        let total: usize = m.params().iter().map(|p| p.len()).sum::<usize>() + 2 * m.in_dim();
        if payload.len() != total {
            return Err(bad("payload size does not match header"));
        }
        let mut off = 0;
        for p in m.params_mut() {
            p.copy_from_slice(&payload[off..off + p.len()]);
            off += p.len();
        }
        let d = m.in_dim();
        m.shift.assign(&ArrayView1::from(&payload[off..off + d]));
        m.scale.assign(&ArrayView1::from(&payload[off + d..off + 2 * d]));
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_neurons: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn typing() -> Self {
        TrainConfig { n_neurons: 1024, lr: 1e-4, batch_size: 1024, epochs: 25, warmup_epochs: 1, weight_decay: 0.01, seed: 0 }
    }

    pub fn span() -> Self {
        TrainConfig { epochs: 50, ..TrainConfig::typing() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.into()));
        if self.warmup_epochs != 1 {
            return bad("warmup is exactly one epoch");
        }
        if self.epochs <= self.warmup_epochs {
            return bad("epochs must exceed the warmup");
        }
        if self.batch_size == 0 || self.n_neurons == 0 {
            return bad("batch size and hidden width must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

/// Linear warmup from 0 over the first epoch, then linear decay to 0.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f32 {
    let warm = (steps_per_epoch * cfg.warmup_epochs).max(1);
    let total = (steps_per_epoch * cfg.epochs).max(warm + 1);
    if step <= warm {
        cfg.lr * step as f32 / warm as f32
    } else {
        cfg.lr * (total.saturating_sub(step)) as f32 / (total - warm) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f32,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub epochs: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

impl TrainCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Micro-F1 over every class except 0 (for two classes: binary F1 of class 1).
pub fn nonzero_micro_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp += usize::from(p != 0);
        } else {
            fp += usize::from(p != 0);
            fn_ += usize::from(g != 0);
        }
    }
    crate::eval::Prf::from_counts(tp, fp, fn_).f1
}

pub fn predict_labels(probe: &MlpProbe, data: &Dataset) -> Vec<usize> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.x.axis_chunks_iter(Axis(0), 4096) {
        out.extend(probe.probs(chunk).rows().into_iter().map(|r| argmax(r.as_slice().expect("row"))));
    }
    out
}

pub fn dev_metric(probe: &MlpProbe, data: &Dataset) -> f64 {
    nonzero_micro_f1(&predict_labels(probe, data), &data.y)
}

fn check_dataset(d: &Dataset, dim: usize, n_classes: usize) -> Result<()> {
    if d.dim() != dim {
        return Err(Error::DimMismatch { expected: dim, got: d.dim() });
    }
    if let Some(&bad) = d.y.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange(format!("label {bad} with {n_classes} classes")));
    }
    Ok(())
}

/// AdamW mini-batch training; returns the checkpoint with the best dev
/// metric (evaluated after every epoch, earliest wins ties). An empty dev
/// set falls back to the training set.
pub fn train_probe(train: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<(MlpProbe, TrainCurve)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyStore);
    }
    if train.n_classes < 2 {
        return Err(Error::InvalidTrainConfig("need at least two classes".into()));
    }
    check_dataset(train, train.dim(), train.n_classes)?;
    let dev = if dev.is_empty() { train } else { dev };
    check_dataset(dev, train.dim(), train.n_classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = MlpProbe::init(train.dim(), cfg.n_neurons, train.n_classes, &mut rng);
    probe.fit_input_norm(train.x.view());
    let mut m = MlpProbe::zeros(train.dim(), cfg.n_neurons, train.n_classes);
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut curve = TrainCurve { best_dev: f64::NEG_INFINITY, ..Default::default() };
    let mut best = probe.clone();
    let mut xb = Array2::<f32>::zeros((bs, train.dim()));
    let mut yb = vec![0usize; bs];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            if xb.nrows() != chunk.len() {
                xb = Array2::zeros((chunk.len(), train.dim()));
                yb.resize(chunk.len(), 0);
            }
            for (r, &k) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&train.x.row(k));
                yb[r] = train.y[k];
            }
            let (loss, g) = probe.loss_and_grad(xb.view(), &yb);
            if !loss.is_finite() {
                return Err(Error::NanLoss(step));
            }
            loss_sum += loss * chunk.len() as f32;
            step += 1;
            let lr = lr_at(step, steps_per_epoch, cfg);
            let t = step as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let decays = [true, false, true, false];
            let gs = g.params();
            for (k, ((p, mk), vk)) in probe.params_mut().into_iter().zip(m.params_mut()).zip(v.params_mut()).enumerate() {
                let wd = if decays[k] { cfg.weight_decay } else { 0.0 };
                for i in 0..p.len() {
                    let gi = gs[k][i];
                    mk[i] = b1 * mk[i] + (1.0 - b1) * gi;
                    vk[i] = b2 * vk[i] + (1.0 - b2) * gi * gi;
                    p[i] -= lr * (mk[i] / c1 / ((vk[i] / c2).sqrt() + eps) + wd * p[i]);
                }
            }
        }
        let metric = dev_metric(&probe, dev);
        log::debug!("probe epoch {epoch}: loss {:.4} dev {metric:.4}", loss_sum / n as f32);
        curve.epochs.push(EpochStat { epoch, train_loss: loss_sum / n as f32, dev_metric: metric });
        if metric > curve.best_dev {
            curve.best_dev = metric;
            curve.best_epoch = epoch;
            best = probe.clone();
        }
    }
    Ok((best, curve))
}

/// Scores features for the streaming and batch annotators.
pub trait Scorer: Sync {
    /// Distribution over IOB2 labels for a hidden state.
    fn typing(&self, hidden: &[f32]) -> Vec<f32>;
    /// Positive-class probability of a span feature.
    fn span(&self, feature: &[f32]) -> f32;
    /// Positive-class probability of an adjacency feature.
    fn adjacency(&self, feature: &[f32]) -> f32;
    fn has_span(&self) -> bool;
    fn has_adjacency(&self) -> bool;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProbeMeta {
    types: EntityTypeSet,
    layer: usize,
    span_variant: SpanVariant,
    vocab_fingerprint: String,
    has_span: bool,
    has_adjacency: bool,
}

/// Trained probes for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub types: EntityTypeSet,
    pub layer: usize,
    pub span_variant: SpanVariant,
    pub vocab_fingerprint: String,
    pub typing: MlpProbe,
    pub span: Option<MlpProbe>,
    pub adjacency: Option<MlpProbe>,
}

impl Scorer for ProbeSet {
    fn typing(&self, hidden: &[f32]) -> Vec<f32> {
        self.typing.probs_row(hidden)
    }

    fn span(&self, feature: &[f32]) -> f32 {
        self.span.as_ref().map_or(0.0, |p| p.probs_row(feature)[1])
    }

    fn adjacency(&self, feature: &[f32]) -> f32 {
        self.adjacency.as_ref().map_or(0.0, |p| p.probs_row(feature)[1])
    }

    fn has_span(&self) -> bool {
        self.span.is_some()
    }

    fn has_adjacency(&self) -> bool {
        self.adjacency.is_some()
    }
}

impl ProbeSet {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = ProbeMeta {
            types: self.types.clone(),
            layer: self.layer,
            span_variant: self.span_variant,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            has_span: self.span.is_some(),
            has_adjacency: self.adjacency.is_some(),
        };
        std::fs::write(dir.join("probes.json"), serde_json::to_string_pretty(&meta)?)?;
        self.typing.save(&dir.join("typing.bin"))?;
        if let Some(p) = &self.span {
            p.save(&dir.join("span.bin"))?;
        }
        if let Some(p) = &self.adjacency {
            p.save(&dir.join("adjacency.bin"))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: ProbeMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("probes.json"))?)?;
        let optional = |present: bool, name: &str| -> Result<Option<MlpProbe>> {
            if present {
                MlpProbe::load(&dir.join(name)).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(ProbeSet {
            typing: MlpProbe::load(&dir.join("typing.bin"))?,
            span: optional(meta.has_span, "span.bin")?,
            adjacency: optional(meta.has_adjacency, "adjacency.bin")?,
            types: meta.types,
            layer: meta.layer,
            span_variant: meta.span_variant,
            vocab_fingerprint: meta.vocab_fingerprint,
        })
    }

    /// Checks the probes against a model.
    pub fn check(&self, lm: &LanguageModel) -> Result<()> {
        let cfg = lm.config();
        if self.vocab_fingerprint != lm.vocab.fingerprint() {
            return Err(Error::TokenizerMismatch("probes were trained with another vocabulary".into()));
        }
        if self.layer >= cfg.n_taps() {
            return Err(Error::OutOfRange(format!("tap {} of {}", self.layer, cfg.n_taps())));
        }
        let dims = [
            (self.typing.in_dim(), cfg.d_model),
            (self.typing.n_classes(), self.types.n_labels()),
        ];
        for (got, expected) in dims {
            if got != expected {
                return Err(Error::DimMismatch { expected, got });
            }
        }
        for p in self.span.iter().chain(&self.adjacency) {
            if p.in_dim() != cfg.attn_dim() {
                return Err(Error::DimMismatch { expected: cfg.attn_dim(), got: p.in_dim() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub scores: Vec<f64>,
    pub best_layer: usize,
}

/// Trains one typing probe per tap and scores each by last-token entity
/// typing on the dev documents. Ties go to the lower tap.
pub fn sweep_layers(
    train: &[AnnotatedDoc],
    dev: &[AnnotatedDoc],
    lm: &LanguageModel,
    types: &EntityTypeSet,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<LayerSweep> {
    let taps = lm.config().n_taps();
    if taps < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two taps".into()));
    }
    let specs: Vec<StoreSpec> = (0..taps).map(|l| StoreSpec::new(Task::Typing { layer: l })).collect();
    let train_stores = build_feature_stores(train, lm, types, &specs, SplitTag::Train, exec)?;
    let dev_stores = build_feature_stores(dev, lm, types, &specs, SplitTag::Dev, exec)?;
    let mut offsets = Vec::with_capacity(dev.len());
    let mut acc = 0;
    for d in dev {
        offsets.push(acc);
        acc += d.len();
    }
    let gold: Vec<(usize, usize)> = dev
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let off = offsets[k];
            Ok(d.gold_spans(types)?.into_iter().map(move |s| (off + s.end, s.ty)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let layers: Vec<usize> = (0..taps).collect();
    let scores = exec.try_map(&layers, |&l| -> Result<f64> {
        let dev_all = dev_stores[l].all();
        let (probe, _) = train_probe(&train_stores[l].trainable(), &dev_all, cfg)?;
        let pred = predict_labels(&probe, &dev_all);
        if gold.is_empty() {
            return Ok(1.0);
        }
        let correct = gold
            .iter()
            .filter(|&&(row, ty)| crate::propagation::Label::from_index(pred[row]).class() == Some(ty))
            .count();
        Ok(correct as f64 / gold.len() as f64)
    })?;
    let mut best_layer = 0;
    for (l, &s) in scores.iter().enumerate() {
        if s > scores[best_layer] {
            best_layer = l;
        }
    }
    Ok(LayerSweep { scores, best_layer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub task: String,
    pub layer: usize,
    pub n_neurons: usize,
    pub lr: f32,
    pub batch: usize,
    pub dev_metric: f64,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best_index: usize,
    pub best_probe: MlpProbe,
    pub best_config: TrainConfig,
}

impl GridResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every configuration and keeps the best dev metric (earliest wins
/// ties).
pub fn grid_search(
    task: &str,
    layer: usize,
    train: &Dataset,
    dev: &Dataset,
    grid: &[TrainConfig],
    exec: Exec,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::InvalidTrainConfig("empty grid".into()));
    }
    let runs = exec.try_map(grid, |c| train_probe(train, dev, c))?;
    let mut rows = Vec::with_capacity(runs.len());
    let mut best_index = 0;
    for (k, (c, (_, curve))) in grid.iter().zip(&runs).enumerate() {
        rows.push(GridRow {
            task: task.to_string(),
            layer,
            n_neurons: c.n_neurons,
            lr: c.lr,
            batch: c.batch_size,
            dev_metric: curve.best_dev,
        });
        if curve.best_dev > runs[best_index].1.best_dev {
            best_index = k;
        }
    }
    let best_probe = runs.into_iter().nth(best_index).expect("index in range").0;
    Ok(GridResult { rows, best_index, best_probe, best_config: grid[best_index].clone() })
}

/// Every combination of the given learning rates and batch sizes.
pub fn expand_grid(base: &TrainConfig, neurons: &[usize], lrs: &[f32], batches: &[usize]) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(neurons.len() * lrs.len() * batches.len());
    for &n_neurons in neurons {
        for &lr in lrs {
            for &batch_size in batches {
                out.push(TrainConfig { n_neurons, lr, batch_size, ..base.clone() });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f32>::zeros((n, 4));
        let mut y = Vec::with_capacity(n);
        for r in 0..n {
            let label = r % 2;
            for c in 0..4 {
                x[[r, c]] = rng.random_range(-1.0..1.0);
            }
            // margin of at least 0.5 along the first axis
            x[[r, 0]] = if label == 1 { rng.random_range(0.5..1.5) } else { rng.random_range(-1.5..-0.5) };
            y.push(label);
        }
        Dataset { x, y, n_classes: 2 }
    }

    fn quick() -> TrainConfig {
        TrainConfig { n_neurons: 32, lr: 5e-3, batch_size: 64, epochs: 20, ..TrainConfig::typing() }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut m = Mlp::<f64>::init(4, 6, 3, &mut rng);
            let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
            m.fit_input_norm(x.view());
            let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let err = gradient_check(&m, x.view(), &y, 1e-6);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn schedule_warms_up_over_one_epoch_then_decays() {
        let c = TrainConfig { lr: 1.0, epochs: 4, ..TrainConfig::typing() };
        assert_eq!(lr_at(0, 10, &c), 0.0);
        assert_eq!(lr_at(5, 10, &c), 0.5);
        assert_eq!(lr_at(10, 10, &c), 1.0);
        assert!((lr_at(25, 10, &c) - 0.5).abs() < 1e-6);
        assert_eq!(lr_at(40, 10, &c), 0.0);
    }

    #[test]
    fn separable_task_is_learned_and_seeded() {
        let train = separable(400, 1);
        let dev = separable(200, 2);
        // oracle: the sign of the first coordinate separates the classes
        assert!(dev.y.iter().enumerate().all(|(r, &y)| (dev.x[[r, 0]] > 0.0) == (y == 1)));
        let (p, curve) = train_probe(&train, &dev, &quick()).unwrap();
        let pred = predict_labels(&p, &dev);
        let acc = pred.iter().zip(&dev.y).filter(|(a, b)| a == b).count() as f64 / dev.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
        assert_eq!(p.predict(train.x.row(0).as_slice().unwrap()).unwrap().argmax(), train.y[0]);
        let (_, again) = train_probe(&train, &dev, &quick()).unwrap();
        assert_eq!(curve, again);
        assert_eq!(dev_metric(&p, &dev), curve.best_dev);
    }

    #[test]
    fn predict_contracts() {
        let p = MlpProbe::zeros(3, 4, 5);
        let d = p.predict(&[1.0, 2.0, 3.0]).unwrap();
        assert!(d.probs.iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert!(p.predict(&[1.0]).is_err());
        let r = MlpProbe::init(3, 8, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let s: f32 = r.predict(&[0.3, -2.0, 1.0]).unwrap().probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batched_and_single_row_paths_agree() {
        let r = MlpProbe::init(6, 16, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i * 7 + j) as f32 * 0.1 - 1.0);
        let mut r = r;
        r.fit_input_norm(x.view());
        assert!(r.scale.iter().all(|&v| v != 1.0));
        let batch = r.probs(x.view());
        for i in 0..5 {
            let row = r.probs_row(x.row(i).as_slice().unwrap());
            for c in 0..3 {
                assert!((row[c] - batch[[i, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = Dataset { x: Array2::zeros((0, 4)), y: vec![], n_classes: 2 };
        assert!(matches!(train_probe(&empty, &empty, &quick()), Err(Error::EmptyStore)));
        let bad = TrainConfig { epochs: 1, ..quick() };
        assert!(train_probe(&separable(10, 0), &empty, &bad).is_err());
        let mut nan = separable(10, 0);
        nan.x[[0, 0]] = f32::NAN;
        assert!(matches!(train_probe(&nan, &empty, &quick()), Err(Error::NanLoss(_))));
    }

    #[test]
    fn identical_batch_loss_decreases_monotonically() {
        let x = Array2::from_shape_fn((8, 3), |(_, j)| [0.5f32, -1.0, 2.0][j]);
        let y = vec![1usize; 8];
        let mut m = MlpProbe::init(3, 8, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let mut prev = m.loss(x.view(), &y);
        for _ in 0..10 {
            let (_, g) = m.loss_and_grad(x.view(), &y);
            let gp = g.params();
            for (k, p) in m.params_mut().into_iter().enumerate() {
                for (v, d) in p.iter_mut().zip(gp[k]) {
                    *v -= 0.05 * d;
                }
            }
            let l = m.loss(x.view(), &y);
            assert!(l < prev, "{l} >= {prev}");
            prev = l;
        }
    }

    #[test]
    fn grid_runs_every_config_and_persists() {
        let train = separable(100, 5);
        let dev = separable(50, 6);
        let base = TrainConfig { n_neurons: 32, epochs: 3, ..TrainConfig::typing() };
        let grid = expand_grid(&base, &[8, 32], &[5e-4, 1e-4, 5e-5], &[16, 32]);
        assert_eq!(grid.len(), 12);
        assert!(grid.iter().all(|c| c.epochs == 3));
        let r = grid_search("span", 0, &train, &dev, &grid, Exec::Sequential).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert_eq!(dev_metric(&r.best_probe, &dev), r.rows[r.best_index].dev_metric);
        let single = grid_search("span", 0, &train, &dev, &grid[..1], Exec::Sequential).unwrap();
        assert_eq!(single.best_config, grid[0]);
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(&dir.path().join("grid.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
        assert!(text.starts_with("task,layer,n_neurons,lr,batch,dev_metric"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn probe_file_round_trip() {
        let mut r = MlpProbe::init(5, 7, 3, &mut ChaCha8Rng::seed_from_u64(1));
        r.fit_input_norm(Array2::from_shape_fn((4, 5), |(i, j)| (i * j) as f32).view());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        r.save(&path).unwrap();
        assert_eq!(MlpProbe::load(&path).unwrap(), r);
    }
}
