//! Next-token training for the toy decoder (manual backward pass over ndarray
//! matmuls). Only used to give the probed model realistic internal structure.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{gelu, gelu_grad, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub weight_decay: f32,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for LmSchedule {
    fn default() -> Self {
        LmSchedule {
            steps: 600,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            warmup_steps: 30,
            weight_decay: 0.01,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub step_losses: Vec<f32>,
}

impl LmTrainReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (k, l) in self.step_losses.iter().enumerate() {
            w.write_record([k.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn view<'a>(v: &'a [f32], rows: usize, cols: usize) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape((rows, cols), v).expect("tensor shape")
}

fn view_mut<'a>(v: &'a mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'a, f32> {
    ArrayViewMut2::from_shape((rows, cols), v).expect("tensor shape")
}

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

fn ln_forward(x: &Array2<f32>, g: &[f32], b: &[f32]) -> (Array2<f32>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::<f32>::zeros((t, d));
    let mut rstd = Array1::<f32>::zeros(t);
    let mut y = Array2::<f32>::zeros((t, d));
    for r in 0..t {
        let row = x.row(r);
        let mean = row.sum() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[[r, c]] = xh;
            y[[r, c]] = xh * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Array2<f32>, cache: &LnCache, g: &[f32], dg: &mut [f32], db: &mut [f32]) -> Array2<f32> {
    let (t, d) = dy.dim();
    let mut dx = Array2::<f32>::zeros((t, d));
    for r in 0..t {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..d {
            let xh = cache.xhat[[r, c]];
            let dxh = dy[[r, c]] * g[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dg[c] += dy[[r, c]] * xh;
            db[c] += dy[[r, c]];
        }
        let rs = cache.rstd[r];
        for c in 0..d {
            let xh = cache.xhat[[r, c]];
            let dxh = dy[[r, c]] * g[c];
            dx[[r, c]] = rs / d as f32 * (d as f32 * dxh - sum_dxh - xh * sum_dxh_xh);
        }
    }
    dx
}

fn add_bias(y: &mut Array2<f32>, b: &[f32]) {
    for mut row in y.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn acc_bias(db: &mut [f32], dy: &Array2<f32>) {
    for row in dy.rows() {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    o: Array2<f32>,
    ln2: LnCache,
    m: Array2<f32>,
    f: Array2<f32>,
    g: Array2<f32>,
}

/// Mean next-token cross-entropy of one sequence; accumulates parameter
/// gradients into `grads` when given.
fn sequence_loss(w: &ModelWeights, tokens: &[u32], grads: Option<&mut ModelWeights>) -> f32 {
    let cfg = &w.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let v_size = cfg.vocab_size;

    let mut x = Array2::<f32>::zeros((t_len, d));
    for (p, &tok) in tokens.iter().enumerate() {
        for c in 0..d {
            x[[p, c]] = w.tok_emb[tok as usize * d + c] + w.pos_emb[p * d + c];
        }
    }
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for b in &w.blocks {
        let (a, ln1) = ln_forward(&x, &b.ln1_g, &b.ln1_b);
        let mut qkv = a.dot(&view(&b.w_qkv, 3 * d, d).t());
        add_bias(&mut qkv, &b.b_qkv);
        let mut o = Array2::<f32>::zeros((t_len, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut sc = q.dot(&k.t());
            for r in 0..t_len {
                let mut row = sc.row_mut(r);
                let mut max = f32::NEG_INFINITY;
                for i in 0..=r {
                    row[i] *= scale;
                    max = max.max(row[i]);
                }
                let mut sum = 0.0;
                for i in 0..=r {
                    row[i] = (row[i] - max).exp();
                    sum += row[i];
                }
                for i in 0..t_len {
                    row[i] = if i <= r { row[i] / sum } else { 0.0 };
                }
            }
            o.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&sc.dot(&v));
            probs.push(sc);
        }
        let mut y = o.dot(&view(&b.w_o, d, d).t());
        add_bias(&mut y, &b.b_o);
        x += &y;
        let (m, ln2) = ln_forward(&x, &b.ln2_g, &b.ln2_b);
        let mut f = m.dot(&view(&b.w_fc, ff, d).t());
        add_bias(&mut f, &b.b_fc);
        let g = f.mapv(gelu);
        let mut z = g.dot(&view(&b.w_proj, d, ff).t());
        add_bias(&mut z, &b.b_proj);
        x += &z;
        caches.push(BlockCache { ln1, a, qkv, probs, o, ln2, m, f, g });
    }
    let (nf, lnf) = ln_forward(&x, &w.lnf_g, &w.lnf_b);
    let emb = view(&w.tok_emb, v_size, d);
    let logits = nf.dot(&emb.t());

    let n_targets = t_len.saturating_sub(1);
    if n_targets == 0 {
        return 0.0;
    }
    let mut loss = 0.0f32;
    let mut dlogits = Array2::<f32>::zeros((t_len, v_size));
    for p in 0..n_targets {
        let row = logits.row(p);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let target = tokens[p + 1] as usize;
        loss += -(row[target] - max - sum.ln());
        for c in 0..v_size {
            dlogits[[p, c]] = (row[c] - max).exp() / sum / n_targets as f32;
        }
        dlogits[[p, target]] -= 1.0 / n_targets as f32;
    }
    loss /= n_targets as f32;

    let Some(gr) = grads else {
        return loss;
    };

    general_mat_mul(1.0, &dlogits.t(), &nf, 1.0, &mut view_mut(&mut gr.tok_emb, v_size, d));
    let dnf = dlogits.dot(&emb);
    let mut dx = ln_backward(&dnf, &lnf, &w.lnf_g, &mut gr.lnf_g, &mut gr.lnf_b);

    for (li, (b, c)) in w.blocks.iter().zip(&caches).enumerate().rev() {
        let gb = &mut gr.blocks[li];
        // MLP branch
        general_mat_mul(1.0, &dx.t(), &c.g, 1.0, &mut view_mut(&mut gb.w_proj, d, ff));
        acc_bias(&mut gb.b_proj, &dx);
        let dg = dx.dot(&view(&b.w_proj, d, ff));
        let mut df = dg;
        df.zip_mut_with(&c.f, |g, &f| *g *= gelu_grad(f));
        general_mat_mul(1.0, &df.t(), &c.m, 1.0, &mut view_mut(&mut gb.w_fc, ff, d));
        acc_bias(&mut gb.b_fc, &df);
        let dm = df.dot(&view(&b.w_fc, ff, d));
        dx += &ln_backward(&dm, &c.ln2, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

        // attention branch
        general_mat_mul(1.0, &dx.t(), &c.o, 1.0, &mut view_mut(&mut gb.w_o, d, d));
        acc_bias(&mut gb.b_o, &dx);
        let d_o = dx.dot(&view(&b.w_o, d, d));
        let mut dqkv = Array2::<f32>::zeros((t_len, 3 * d));
        for h in 0..heads {
            let p = &c.probs[h];
            let q = c.qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = c.qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = c.qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let doh = d_o.slice(s![.., h * hd..(h + 1) * hd]);
            let dp = doh.dot(&v.t());
            let dv = p.t().dot(&doh);
            let mut ds = Array2::<f32>::zeros((t_len, t_len));
            for r in 0..t_len {
                let mut dot_pd = 0.0;
                for i in 0..=r {
                    dot_pd += p[[r, i]] * dp[[r, i]];
                }
                for i in 0..=r {
                    ds[[r, i]] = p[[r, i]] * (dp[[r, i]] - dot_pd) * scale;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
        }
        general_mat_mul(1.0, &dqkv.t(), &c.a, 1.0, &mut view_mut(&mut gb.w_qkv, 3 * d, d));
        acc_bias(&mut gb.b_qkv, &dqkv);
        let da = dqkv.dot(&view(&b.w_qkv, 3 * d, d));
        dx += &ln_backward(&da, &c.ln1, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
    }
    for (p, &tok) in tokens.iter().enumerate() {
        let row = dx.row(p);
        for cidx in 0..d {
            gr.tok_emb[tok as usize * d + cidx] += row[cidx];
            gr.pos_emb[p * d + cidx] += row[cidx];
        }
    }
    loss
}

fn decay_mask(cfg: &ModelConfig) -> Vec<bool> {
    let mut m = vec![true, true];
    for _ in 0..cfg.n_layers {
        m.extend([false, false, true, false, true, false, false, false, true, false, true, false]);
    }
    m.extend([false, false]);
    m
}

fn flatten_stream(corpus: &[Vec<u32>]) -> Vec<u32> {
    corpus.iter().flatten().copied().collect()
}

fn lr_at(step: usize, s: &LmSchedule) -> f32 {
    if step < s.warmup_steps {
        return s.lr * (step + 1) as f32 / s.warmup_steps as f32;
    }
    let span = (s.steps - s.warmup_steps).max(1) as f32;
    let progress = (step - s.warmup_steps) as f32 / span;
    let floor = 0.1;
    s.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()))
}

/// Mean next-token loss over consecutive non-overlapping windows of the
/// concatenated documents.
pub fn eval_loss(w: &ModelWeights, corpus: &[Vec<u32>], seq_len: usize) -> Result<f32> {
    let stream = flatten_stream(corpus);
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let len = seq_len.min(w.config.max_context).max(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in stream.chunks(len) {
        if chunk.len() < 2 {
            continue;
        }
        let n = (chunk.len() - 1) as f32;
        total += sequence_loss(w, chunk, None) * n;
        count += n;
    }
    Ok(total / count)
}

/// Trains on random windows of the concatenated corpus with AdamW, linear
/// warmup and cosine decay. Seeded and reproducible.
pub fn train_toy_lm(
    weights: &ModelWeights,
    corpus: &[Vec<u32>],
    schedule: &LmSchedule,
) -> Result<(ModelWeights, LmTrainReport)> {
    let stream = flatten_stream(corpus);
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let mut w = weights.clone();
    let mut report = LmTrainReport::default();
    if schedule.steps == 0 {
        return Ok((w, report));
    }
    let cfg = w.config.clone();
    let seq_len = schedule.seq_len.min(cfg.max_context).min(stream.len()).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut m = ModelWeights::zeros(&cfg);
    let mut v = ModelWeights::zeros(&cfg);
    let mask = decay_mask(&cfg);
    let (b1, b2, eps) = (0.9f32, 0.95f32, 1e-8f32);

    for step in 0..schedule.steps {
        let starts: Vec<usize> = (0..schedule.batch_size.max(1))
            .map(|_| rng.random_range(0..=stream.len() - seq_len))
            .collect();
        let results = schedule.exec.map(&starts, |&s0| {
            let mut g = ModelWeights::zeros(&cfg);
            let loss = sequence_loss(&w, &stream[s0..s0 + seq_len], Some(&mut g));
            (loss, g)
        });
        let bs = results.len() as f32;
        let mut grads = ModelWeights::zeros(&cfg);
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l / bs;
            for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, x) in acc.iter_mut().zip(t) {
                    *a += x / bs;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NanLoss(step));
        }
        report.step_losses.push(loss);

        let norm: f32 = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f32>()
            .sqrt();
        let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        let lr = lr_at(step, schedule);
        let bc1 = 1.0 - b1.powi(step as i32 + 1);
        let bc2 = 1.0 - b2.powi(step as i32 + 1);
        let params = w.tensors_mut();
        let ms = m.tensors_mut();
        let vs = v.tensors_mut();
        let gs = grads.tensors();
        for (ti, (((p, mt), vt), gt)) in params.into_iter().zip(ms).zip(vs).zip(gs).enumerate() {
            let decay = if mask[ti] { schedule.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let g = gt[i] * clip;
                mt[i] = b1 * mt[i] + (1.0 - b1) * g;
                vt[i] = b2 * vt[i] + (1.0 - b2) * g * g;
                p[i] -= lr * decay * p[i];
                p[i] -= lr * (mt[i] / bc1) / ((vt[i] / bc2).sqrt() + eps);
            }
        }
        if step % 50 == 0 {
            log::info!("lm step {step}: loss {loss:.4} lr {lr:.2e}");
        }
    }
    Ok((w, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, init_model};

    fn tiny() -> ModelWeights {
        init_model(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_context: 16,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let w = tiny();
        let toks = [1u32, 4, 7, 2, 9, 3];
        let b = forward_full(&w, &toks).unwrap();
        let mut expected = 0.0;
        for p in 0..toks.len() - 1 {
            let row = b.logits.row(p);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            expected += lse - row[toks[p + 1] as usize];
        }
        expected /= (toks.len() - 1) as f32;
        assert!((sequence_loss(&w, &toks, None) - expected).abs() < 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Perturb every bias/gain plus a sample of matrix entries in f32 with a
        // loose tolerance; the probe MLP has the strict f64 check.
        let mut w = tiny();
        for b in &mut w.blocks {
            for v in b.b_qkv.iter_mut().chain(b.b_fc.iter_mut()) {
                *v = 0.05;
            }
        }
        let toks = [1u32, 4, 7, 2, 9, 3, 3, 5];
        let mut g = ModelWeights::zeros(&w.config);
        sequence_loss(&w, &toks, Some(&mut g));
        let n_tensors = w.tensors().len();
        let mut checked = 0;
        for ti in 0..n_tensors {
            let len = w.tensors()[ti].len();
            for idx in (0..len).step_by((len / 5).max(1)) {
                let h = 2e-3f32;
                let mut wp = w.clone();
                wp.tensors_mut()[ti][idx] += h;
                let lp = sequence_loss(&wp, &toks, None);
                let mut wm = w.clone();
                wm.tensors_mut()[ti][idx] -= h;
                let lm = sequence_loss(&wm, &toks, None);
                let fd = (lp - lm) / (2.0 * h);
                let an = g.tensors()[ti][idx];
                assert!(
                    (fd - an).abs() <= 2e-3 + 0.05 * an.abs().max(fd.abs()),
                    "tensor {ti} idx {idx}: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn zero_steps_is_identity_and_training_is_seeded() {
        let w = tiny();
        let corpus = vec![vec![1u32, 2, 3, 4, 5, 6, 7, 8, 9, 10], vec![3, 4, 5, 6, 7]];
        let sched0 = LmSchedule { steps: 0, ..Default::default() };
        let (same, _) = train_toy_lm(&w, &corpus, &sched0).unwrap();
        assert_eq!(same, w);

        let sched = LmSchedule { steps: 20, batch_size: 2, seq_len: 8, warmup_steps: 2, ..Default::default() };
        let (a, ra) = train_toy_lm(&w, &corpus, &sched).unwrap();
        let (b, rb) = train_toy_lm(&w, &corpus, &sched).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra.step_losses, rb.step_losses);
        assert!(train_toy_lm(&w, &[], &sched).is_err());
    }
}
