//! A small pre-norm GPT-style decoder that exposes every residual-stream tap
//! and every attention map, with KV-cached greedy decoding.

mod forward;
mod generate;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{payload_digest, read_container, write_container, WEIGHTS_MAGIC};
use crate::tokenizer::Vocab;

pub use forward::{forward_full, DecodeOutput, KvCache, RepBundle};
pub use generate::{apply_repetition_penalty, generate, greedy_pick, DecodeParams, DecodeStrategy};
pub use train::{eval_loss, train_toy_lm, LmSchedule, LmTrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.n_heads == 0 {
            return bad("n_heads must be >= 1");
        }
        if self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("dimensions must be non-zero");
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context < 2 {
            return bad("max_context must be >= 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of hidden-state tap points: the embedding output plus one per block.
    pub fn n_taps(&self) -> usize {
        self.n_layers + 1
    }

    /// Width of an attention feature: one weight per (layer, head).
    pub fn attn_dim(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Analytic parameter count (LM head tied to the token embedding).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (ff * d + ff) + (d * ff + d);
        self.vocab_size * d + self.max_context * d + self.n_layers * block + 2 * d
    }

    fn header_fields(&self) -> Vec<u64> {
        vec![
            self.n_layers as u64,
            self.n_heads as u64,
            self.d_model as u64,
            self.d_ff as u64,
            self.vocab_size as u64,
            self.max_context as u64,
            self.seed,
        ]
    }

    fn from_header(fields: &[u64]) -> Option<Self> {
        if fields.len() != 7 {
            return None;
        }
        Some(ModelConfig {
            n_layers: fields[0] as usize,
            n_heads: fields[1] as usize,
            d_model: fields[2] as usize,
            d_ff: fields[3] as usize,
            vocab_size: fields[4] as usize,
            max_context: fields[5] as usize,
            seed: fields[6],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    /// `[3 * d_model][d_model]`: query rows, then key rows, then value rows.
    pub w_qkv: Vec<f32>,
    pub b_qkv: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_fc: Vec<f32>,
    pub b_fc: Vec<f32>,
    pub w_proj: Vec<f32>,
    pub b_proj: Vec<f32>,
}

impl Block {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        Block {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: vec![0.0; 3 * d * d],
            b_qkv: vec![0.0; 3 * d],
            w_o: vec![0.0; d * d],
            b_o: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_fc: vec![0.0; ff * d],
            b_fc: vec![0.0; ff],
            w_proj: vec![0.0; d * ff],
            b_proj: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [&Vec<f32>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o,
            &self.ln2_g, &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv, &mut self.w_o,
            &mut self.b_o, &mut self.ln2_g, &mut self.ln2_b, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

/// Model parameters. Matrices are row-major `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_emb: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelWeights {
            config: cfg.clone(),
            tok_emb: vec![0.0; cfg.vocab_size * cfg.d_model],
            pos_emb: vec![0.0; cfg.max_context * cfg.d_model],
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(cfg)).collect(),
            lnf_g: vec![0.0; cfg.d_model],
            lnf_b: vec![0.0; cfg.d_model],
        }
    }

    /// Tensors in file order: token embedding, position embedding, each block
    /// (ln1 gain/bias, qkv weight/bias, out weight/bias, ln2 gain/bias, fc
    /// weight/bias, proj weight/bias), final norm gain/bias.
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.lnf_g);
        v.push(&self.lnf_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Hex SHA-256 over all parameters in file order.
    pub fn checksum(&self) -> String {
        payload_digest(&self.flatten())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, WEIGHTS_MAGIC, &self.config.header_fields(), &self.flatten())
    }

    /// Reads a weight file and checks it against the expected configuration.
    pub fn load(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let w = Self::read(path)?;
        if &w.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "file has {:?}, expected {:?}",
                w.config, expected
            )));
        }
        Ok(w)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (fields, payload) = read_container(path, WEIGHTS_MAGIC)?;
        let cfg = ModelConfig::from_header(&fields).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "malformed model header".into(),
        })?;
        cfg.validate()?;
        let mut w = ModelWeights::zeros(&cfg);
        if payload.len() != w.param_count() {
            return Err(Error::ConfigMismatch(format!(
                "payload has {} values, config implies {}",
                payload.len(),
                w.param_count()
            )));
        }
        let mut off = 0;
        for t in w.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&payload[off..off + n]);
            off += n;
        }
        Ok(w)
    }
}

/// Deterministic initialisation from `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = ModelWeights::zeros(cfg);
    let std = 0.02f32;
    let resid_std = std / (2.0 * cfg.n_layers as f32).sqrt();
    let fill = |t: &mut Vec<f32>, s: f32, rng: &mut ChaCha8Rng| {
        let n = Normal::new(0.0f32, s).expect("positive std");
        for v in t.iter_mut() {
            *v = n.sample(rng);
        }
    };
    fill(&mut w.tok_emb, std, &mut rng);
    fill(&mut w.pos_emb, std * 0.5, &mut rng);
    for b in &mut w.blocks {
        b.ln1_g.fill(1.0);
        b.ln2_g.fill(1.0);
        fill(&mut b.w_qkv, std, &mut rng);
        fill(&mut b.w_o, resid_std, &mut rng);
        fill(&mut b.w_fc, std, &mut rng);
        fill(&mut b.w_proj, resid_std, &mut rng);
    }
    w.lnf_g.fill(1.0);
    log::debug!("initialised model with {} parameters", w.param_count());
    Ok(w)
}

/// Weights plus the vocabulary they were trained with.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub weights: ModelWeights,
    pub vocab: Vocab,
}

impl LanguageModel {
    pub fn new(weights: ModelWeights, vocab: Vocab) -> Result<Self> {
        if weights.config.vocab_size != vocab.len() {
            return Err(Error::TokenizerMismatch(format!(
                "model vocab_size {} but vocabulary has {} pieces",
                weights.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(LanguageModel { weights, vocab })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.weights.save(&dir.join("model.bin"))?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string(&self.vocab)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let weights = ModelWeights::read(&dir.join("model.bin"))?;
        let vocab: Vocab = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        LanguageModel::new(weights, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg(l: usize, h: usize, d: usize, v: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: l,
            n_heads: h,
            d_model: d,
            d_ff: 4 * d,
            vocab_size: v,
            max_context: 64,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&cfg(2, 2, 32, 64, 7)).unwrap();
        let b = init_model(&cfg(2, 2, 32, 64, 7)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = init_model(&cfg(2, 2, 32, 64, 8)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = cfg(2, 4, 32, 64, 1);
        c.d_model = 30;
        c.d_ff = 120;
        assert!(matches!(init_model(&c), Err(Error::InvalidConfig(_))));
        let mut z = cfg(2, 2, 32, 64, 1);
        z.n_layers = 0;
        assert!(init_model(&z).is_err());
    }

    #[test]
    fn parameter_count_matches_hand_computation() {
        // L=4, H=4, d=128, ff=512, V=64, N=64:
        // embeddings 64*128 + 64*128 = 16384
        // per block: ln 256 + qkv 49152+384 + out 16384+128 + ln 256
        //            + fc 65536+512 + proj 65536+128 = 198272
        // final norm 256
        let c = ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 64,
            max_context: 64,
            seed: 0,
        };
        assert_eq!(c.param_count(), 16384 + 4 * 198272 + 256);
        assert_eq!(init_model(&c).unwrap().param_count(), c.param_count());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let w = init_model(&cfg(2, 2, 16, 20, 3)).unwrap();
        w.save(&p).unwrap();
        let back = ModelWeights::load(&p, &w.config).unwrap();
        assert_eq!(back.checksum(), w.checksum());
        assert_eq!(back, w);

        let mut wrong = w.config.clone();
        wrong.d_model = 32;
        assert!(matches!(ModelWeights::load(&p, &wrong), Err(Error::ConfigMismatch(_))));

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(ModelWeights::read(&p), Err(Error::Checksum(_))));
    }
}
