//! Per-token latency of plain generation, generation with incremental
//! annotation, and generation with full re-annotation after every token.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::probe::Scorer;
use crate::propagation::EntityTypeSet;
use crate::stream::{annotate_text, init_stream, step, PipelineConfig, StreamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    GenerationOnly,
    Incremental,
    Rerun,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::GenerationOnly, BenchMode::Incremental, BenchMode::Rerun];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::GenerationOnly => "generation_only",
            BenchMode::Incremental => "+streaming",
            BenchMode::Rerun => "+rerun",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Sequence lengths at which timing starts; ascending.
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub warmups: usize,
    /// Tokens timed per prompt and repetition.
    pub steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { lengths: vec![32, 64, 128, 256], reps: 5, warmups: 2, steps: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeStat {
    pub mode: BenchMode,
    pub mean_ms: f64,
    pub stdev_ms: f64,
    pub median_ms: f64,
    pub tokens_per_s: f64,
    pub delta_abs_ms: f64,
    pub delta_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub length: usize,
    pub modes: Vec<ModeStat>,
}

impl LengthRow {
    pub fn mode(&self, m: BenchMode) -> &ModeStat {
        self.modes.iter().find(|s| s.mode == m).expect("every mode is measured")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<LengthRow>,
    pub warnings: Vec<String>,
    /// Incremental and re-run annotation agreed at the end of every timed run.
    pub modes_agree: bool,
}

impl BenchReport {
    pub fn row(&self, length: usize) -> Option<&LengthRow> {
        self.rows.iter().find(|r| r.length == length)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>6}  {:<16}{:>12}{:>10}{:>10}{:>12}{:>12}{:>10}\n",
            "n", "mode", "ms/token", "stdev", "median", "tokens/s", "d_abs ms", "d_rel"
        );
        for r in &self.rows {
            for m in &r.modes {
                s += &format!(
                    "{:>6}  {:<16}{:>12.4}{:>10.4}{:>10.4}{:>12.1}{:>12.4}{:>9.2}%\n",
                    r.length,
                    m.mode.name(),
                    m.mean_ms,
                    m.stdev_ms,
                    m.median_ms,
                    m.tokens_per_s,
                    m.delta_abs_ms,
                    m.delta_rel * 100.0
                );
            }
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        s
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["length", "mode", "ms_per_token", "stdev_ms", "median_ms", "tokens_per_s", "delta_abs_ms", "delta_rel"])?;
        for r in &self.rows {
            for m in &r.modes {
                w.write_record([
                    r.length.to_string(),
                    m.mode.name().to_string(),
                    m.mean_ms.to_string(),
                    m.stdev_ms.to_string(),
                    m.median_ms.to_string(),
                    m.tokens_per_s.to_string(),
                    m.delta_abs_ms.to_string(),
                    m.delta_rel.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample mean and standard deviation (0 for a single sample).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Times `steps` tokens from a prefilled state; returns elapsed time and
/// whether incremental and re-run annotation agree at the end.
fn time_mode(
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    start: &StreamState,
    mode: BenchMode,
    steps: usize,
) -> Result<(Duration, bool)> {
    let mut s = start.clone();
    let cfg = s.config().clone();
    let t0 = Instant::now();
    for _ in 0..steps {
        match mode {
            BenchMode::GenerationOnly => {
                s.advance_plain(lm)?;
            }
            BenchMode::Incremental => {
                step(lm, scorer, &mut s)?;
            }
            BenchMode::Rerun => {
                s.advance_plain(lm)?;
                std::hint::black_box(annotate_text(lm, scorer, s.tokens(), &cfg)?);
            }
        }
    }
    let elapsed = t0.elapsed();
    let agree = match mode {
        BenchMode::Incremental => annotate_text(lm, scorer, s.tokens(), &cfg)? == s.entities(),
        _ => true,
    };
    Ok((elapsed, agree))
}

/// Prefills each prompt to every requested length, then times the three
/// modes. Runs serially.
pub fn bench(
    lm: &LanguageModel,
    scorer: &dyn Scorer,
    types: &EntityTypeSet,
    prompts: &[Vec<u32>],
    cfg: &PipelineConfig,
    bc: &BenchConfig,
) -> Result<BenchReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidBench("need at least one prompt".into()));
    }
    if bc.lengths.is_empty() || bc.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidBench("lengths must be non-empty and strictly ascending".into()));
    }
    if bc.reps == 0 || bc.steps == 0 {
        return Err(Error::InvalidBench("reps and steps must be positive".into()));
    }
    let max_len = *bc.lengths.last().expect("non-empty");
    let ctx = lm.config().max_context;
    if max_len + bc.steps > ctx {
        return Err(Error::ContextOverflow { len: max_len + bc.steps, max: ctx });
    }
    let mut warnings = Vec::new();
    if bc.reps == 1 {
        warnings.push("a single repetition reports a standard deviation of 0".to_string());
        log::warn!("a single repetition reports a standard deviation of 0");
    }
    // prefilled states per length and prompt
    let mut starts: Vec<Vec<StreamState>> = vec![Vec::new(); bc.lengths.len()];
    for p in prompts {
        if p.len() > bc.lengths[0] {
            return Err(Error::InvalidBench(format!("prompt of {} tokens is longer than {}", p.len(), bc.lengths[0])));
        }
        let mut run = cfg.clone();
        run.decode.max_new_tokens = max_len + bc.steps - p.len();
        let (mut state, _) = init_stream(lm, scorer, types, p, &run)?;
        for (k, &n) in bc.lengths.iter().enumerate() {
            while state.tokens().len() < n {
                step(lm, scorer, &mut state)?;
            }
            starts[k].push(state.clone());
        }
    }
    // Repetitions are the outer loop and lengths the inner one, so a slow
    // spell on a shared machine hits every length of a mode alike.
    let mut modes_agree = true;
    let mut totals = vec![vec![vec![Duration::ZERO; BenchMode::ALL.len()]; bc.lengths.len()]; bc.warmups + bc.reps];
    for rep_totals in totals.iter_mut() {
        for (m, &mode) in BenchMode::ALL.iter().enumerate() {
            for (k, by_mode) in rep_totals.iter_mut().enumerate() {
                for s in &starts[k] {
                    let (d, agree) = time_mode(lm, scorer, s, mode, bc.steps)?;
                    by_mode[m] += d;
                    modes_agree &= agree;
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(bc.lengths.len());
    for (k, &n) in bc.lengths.iter().enumerate() {
        let per_token = (bc.steps * starts[k].len()) as f64;
        let per_mode: Vec<_> = BenchMode::ALL
            .iter()
            .enumerate()
            .map(|(m, &mode)| {
                let samples: Vec<f64> =
                    totals[bc.warmups..].iter().map(|t| t[k][m].as_secs_f64() * 1e3 / per_token).collect();
                let (mean, sd) = mean_stdev(&samples);
                (mode, mean, sd, median(&samples))
            })
            .collect();
        let base = per_mode[0].1;
        let modes = per_mode
            .into_iter()
            .map(|(mode, mean, sd, med)| ModeStat {
                mode,
                mean_ms: mean,
                stdev_ms: sd,
                median_ms: med,
                tokens_per_s: 1e3 / mean,
                delta_abs_ms: mean - base,
                delta_rel: (mean - base) / base,
            })
            .collect();
        rows.push(LengthRow { length: n, modes });
    }
    Ok(BenchReport { config: bc.clone(), rows, warnings, modes_agree })
}
