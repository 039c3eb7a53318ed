use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView3};

use super::{Block, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::kernels::{dot, gelu, layer_norm, matvec, softmax_in_place};

/// Every representation of one forward pass.
#[derive(Clone, Debug)]
pub struct RepBundle {
    /// `[L + 1][seq][d_model]`; tap 0 is the embedding output, tap `l` the
    /// residual stream after block `l`.
    pub hidden: Array3<f32>,
    /// `[L][H][seq][seq]` post-softmax attention; row `j` attends to `i <= j`.
    pub attn: Array4<f32>,
    /// `[seq][vocab]`.
    pub logits: Array2<f32>,
}

impl RepBundle {
    pub fn seq_len(&self) -> usize {
        self.hidden.shape()[1]
    }

    pub fn n_taps(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn hidden_row(&self, tap: usize, pos: usize) -> ArrayView1<'_, f32> {
        self.hidden.slice(s![tap, pos, ..])
    }

    /// Attention rows of query position `k` over keys `0..=k`, shaped `[L][H][k + 1]`.
    pub fn attn_rows(&self, k: usize) -> ArrayView3<'_, f32> {
        self.attn.slice(s![.., .., k, ..=k])
    }
}

/// Per-layer keys and values of every position decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    n_layers: usize,
    d_model: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(cfg.max_context * cfg.d_model)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(cfg.max_context * cfg.d_model)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_layers != cfg.n_layers || self.d_model != cfg.d_model {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers x {} dims, model has {} x {}",
                self.n_layers, self.d_model, cfg.n_layers, cfg.d_model
            )));
        }
        Ok(())
    }
}

/// Output of one incremental step at position `position`.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub position: usize,
    pub logits: Vec<f32>,
    /// `[L + 1][d_model]`
    pub hidden: Array2<f32>,
    /// `[L][H][position + 1]`
    pub attn: Array3<f32>,
}

fn check_token(cfg: &ModelConfig, t: u32) -> Result<()> {
    if (t as usize) < cfg.vocab_size {
        Ok(())
    } else {
        Err(Error::UnknownToken(t))
    }
}

fn embed(w: &ModelWeights, token: u32, pos: usize, out: &mut [f32]) {
    let d = w.config.d_model;
    let te = &w.tok_emb[token as usize * d..(token as usize + 1) * d];
    let pe = &w.pos_emb[pos * d..(pos + 1) * d];
    for i in 0..d {
        out[i] = te[i] + pe[i];
    }
}

struct Scratch {
    ln: Vec<f32>,
    tmp: Vec<f32>,
    ff: Vec<f32>,
    att: Vec<f32>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        Scratch {
            ln: vec![0.0; cfg.d_model],
            tmp: vec![0.0; cfg.d_model],
            ff: vec![0.0; cfg.d_ff],
            att: vec![0.0; cfg.d_model],
        }
    }
}

fn qkv_row(b: &Block, x: &[f32], sc: &mut Scratch, qkv: &mut [f32]) {
    layer_norm(x, &b.ln1_g, &b.ln1_b, &mut sc.ln);
    matvec(&b.w_qkv, &b.b_qkv, &sc.ln, qkv);
}

/// Causal attention of one query row over `len` cached keys/values. Writes
/// per-head probabilities into `probs` (`[H][len]`) and the concatenated head
/// outputs into `out`.
fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    len: usize,
    n_heads: usize,
    probs: &mut [f32],
    out: &mut [f32],
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    out.fill(0.0);
    // Whole-row products vectorise where per-head dots of a few lanes do not.
    let mut prod = vec![0.0f32; d];
    for (i, ki) in keys[..len * d].chunks_exact(d).enumerate() {
        for ((p, a), b) in prod.iter_mut().zip(q).zip(ki) {
            *p = a * b;
        }
        for (h, ph) in prod.chunks_exact(hd).enumerate() {
            probs[h * len + i] = ph.iter().sum::<f32>() * scale;
        }
    }
    for p in probs[..n_heads * len].chunks_exact_mut(len) {
        softmax_in_place(p);
    }
    for (i, vi) in values[..len * d].chunks_exact(d).enumerate() {
        for (h, wh) in prod.chunks_exact_mut(hd).enumerate() {
            wh.fill(probs[h * len + i]);
        }
        for ((o, w), v) in out.iter_mut().zip(&prod).zip(vi) {
            *o += w * v;
        }
    }
}

fn post_attn_row(b: &Block, x: &mut [f32], sc: &mut Scratch) {
    matvec(&b.w_o, &b.b_o, &sc.att, &mut sc.tmp);
    for (xi, t) in x.iter_mut().zip(&sc.tmp) {
        *xi += t;
    }
    layer_norm(x, &b.ln2_g, &b.ln2_b, &mut sc.ln);
    matvec(&b.w_fc, &b.b_fc, &sc.ln, &mut sc.ff);
    for v in sc.ff.iter_mut() {
        *v = gelu(*v);
    }
    matvec(&b.w_proj, &b.b_proj, &sc.ff, &mut sc.tmp);
    for (xi, t) in x.iter_mut().zip(&sc.tmp) {
        *xi += t;
    }
}

fn logits_row(w: &ModelWeights, x: &[f32], sc: &mut Scratch, out: &mut [f32]) {
    let d = w.config.d_model;
    layer_norm(x, &w.lnf_g, &w.lnf_b, &mut sc.ln);
    for (v, o) in out.iter_mut().enumerate() {
        *o = dot(&w.tok_emb[v * d..(v + 1) * d], &sc.ln);
    }
}

/// Runs the whole sequence from scratch, layer by layer.
pub fn forward_full(w: &ModelWeights, tokens: &[u32]) -> Result<RepBundle> {
    let cfg = &w.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if n > cfg.max_context {
        return Err(Error::ContextOverflow { len: n, max: cfg.max_context });
    }
    for &t in tokens {
        check_token(cfg, t)?;
    }
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let mut hidden = Array3::<f32>::zeros((cfg.n_layers + 1, n, d));
    let mut attn = Array4::<f32>::zeros((cfg.n_layers, heads, n, n));
    let mut logits = Array2::<f32>::zeros((n, cfg.vocab_size));
    let mut x = vec![0.0f32; n * d];
    for (p, &t) in tokens.iter().enumerate() {
        embed(w, t, p, &mut x[p * d..(p + 1) * d]);
    }
    hidden
        .slice_mut(s![0, .., ..])
        .iter_mut()
        .zip(&x)
        .for_each(|(h, v)| *h = *v);

    let mut sc = Scratch::new(cfg);
    let mut qkv = vec![0.0f32; 3 * d];
    let mut queries = vec![0.0f32; n * d];
    let mut keys = vec![0.0f32; n * d];
    let mut values = vec![0.0f32; n * d];
    let mut probs = vec![0.0f32; heads * n];
    for (l, b) in w.blocks.iter().enumerate() {
        for p in 0..n {
            qkv_row(b, &x[p * d..(p + 1) * d], &mut sc, &mut qkv);
            queries[p * d..(p + 1) * d].copy_from_slice(&qkv[..d]);
            keys[p * d..(p + 1) * d].copy_from_slice(&qkv[d..2 * d]);
            values[p * d..(p + 1) * d].copy_from_slice(&qkv[2 * d..]);
        }
        for p in 0..n {
            let len = p + 1;
            attend_row(
                &queries[p * d..(p + 1) * d],
                &keys[..len * d],
                &values[..len * d],
                len,
                heads,
                &mut probs[..heads * len],
                &mut sc.att,
            );
            for h in 0..heads {
                attn.slice_mut(s![l, h, p, ..len])
                    .as_slice_mut()
                    .expect("contiguous attention row")
                    .copy_from_slice(&probs[h * len..(h + 1) * len]);
            }
            post_attn_row(b, &mut x[p * d..(p + 1) * d], &mut sc);
        }
        hidden
            .slice_mut(s![l + 1, .., ..])
            .iter_mut()
            .zip(&x)
            .for_each(|(h, v)| *h = *v);
    }
    let mut row = vec![0.0f32; cfg.vocab_size];
    for p in 0..n {
        logits_row(w, &x[p * d..(p + 1) * d], &mut sc, &mut row);
        logits.row_mut(p).iter_mut().zip(&row).for_each(|(o, v)| *o = *v);
    }
    Ok(RepBundle { hidden, attn, logits })
}

impl ModelWeights {
    /// Feeds one token at position `cache.len()` and extends the cache.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<DecodeOutput> {
        let cfg = &self.config;
        cache.check(cfg)?;
        check_token(cfg, token)?;
        let pos = cache.len;
        if pos >= cfg.max_context {
            return Err(Error::ContextOverflow { len: pos + 1, max: cfg.max_context });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let len = pos + 1;
        let mut hidden = Array2::<f32>::zeros((cfg.n_layers + 1, d));
        let mut attn = Array3::<f32>::zeros((cfg.n_layers, heads, len));
        let mut x = vec![0.0f32; d];
        embed(self, token, pos, &mut x);
        hidden.row_mut(0).iter_mut().zip(&x).for_each(|(h, v)| *h = *v);

        let mut sc = Scratch::new(cfg);
        let mut qkv = vec![0.0f32; 3 * d];
        let attn_flat = attn.as_slice_mut().expect("fresh array is contiguous");
        for (l, b) in self.blocks.iter().enumerate() {
            qkv_row(b, &x, &mut sc, &mut qkv);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            attend_row(
                &qkv[..d],
                &cache.keys[l],
                &cache.values[l],
                len,
                heads,
                &mut attn_flat[l * heads * len..(l + 1) * heads * len],
                &mut sc.att,
            );
            post_attn_row(b, &mut x, &mut sc);
            hidden.row_mut(l + 1).iter_mut().zip(&x).for_each(|(h, v)| *h = *v);
        }
        cache.len += 1;
        let mut logits = vec![0.0f32; cfg.vocab_size];
        logits_row(self, &x, &mut sc, &mut logits);
        Ok(DecodeOutput { position: pos, logits, hidden, attn })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small() -> ModelWeights {
        init_model(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 20,
            max_context: 64,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn attention_is_causal_and_normalised() {
        let w = small();
        let b = forward_full(&w, &[3, 5, 7, 9, 11]).unwrap();
        assert_eq!(b.hidden.shape(), &[3, 5, 16]);
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(b.attn[[l, h, 0, 0]], 1.0);
                for j in 0..5 {
                    let s: f32 = (0..5).map(|i| b.attn[[l, h, j, i]]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    for i in j + 1..5 {
                        assert_eq!(b.attn[[l, h, j, i]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn decode_chain_reproduces_forward_full() {
        let w = small();
        let toks: Vec<u32> = (0..12).map(|i| (i * 7 % 20) as u32).collect();
        let full = forward_full(&w, &toks).unwrap();
        let mut cache = KvCache::new(&w.config);
        for (p, &t) in toks.iter().enumerate() {
            let out = w.decode_step(&mut cache, t).unwrap();
            assert_eq!(out.attn.shape()[2], p + 1);
            for tap in 0..3 {
                for c in 0..16 {
                    assert!((out.hidden[[tap, c]] - full.hidden[[tap, p, c]]).abs() <= 1e-6);
                }
            }
            for l in 0..2 {
                for h in 0..2 {
                    for i in 0..=p {
                        assert!((out.attn[[l, h, i]] - full.attn[[l, h, p, i]]).abs() <= 1e-6);
                    }
                }
            }
            for v in 0..20 {
                assert!((out.logits[v] - full.logits[[p, v]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn base_case_single_token() {
        let w = small();
        let full = forward_full(&w, &[crate::tokenizer::BOS]).unwrap();
        let mut cache = KvCache::new(&w.config);
        let out = w.decode_step(&mut cache, crate::tokenizer::BOS).unwrap();
        assert_eq!(out.hidden, full.hidden.slice(s![.., 0, ..]));
        assert_eq!(out.logits, full.logits.row(0).to_vec());
    }

    #[test]
    fn errors() {
        let w = small();
        assert!(matches!(forward_full(&w, &[]), Err(Error::EmptySequence)));
        assert!(matches!(forward_full(&w, &[99]), Err(Error::UnknownToken(99))));
        assert!(matches!(
            forward_full(&w, &vec![1; 65]),
            Err(Error::ContextOverflow { .. })
        ));
        let other = init_model(&ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 20,
            max_context: 64,
            seed: 1,
        })
        .unwrap();
        let mut cache = KvCache::new(&other.config);
        assert!(matches!(w.decode_step(&mut cache, 1), Err(Error::CacheMismatch(_))));
    }
}
