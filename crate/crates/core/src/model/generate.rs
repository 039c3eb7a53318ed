use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{KvCache, ModelWeights};
use crate::error::{Error, Result};
use crate::kernels::argmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub repetition_penalty: f32,
    pub strategy: DecodeStrategy,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_new_tokens: 100,
            repetition_penalty: 1.2,
            strategy: DecodeStrategy::Greedy,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::InvalidPenalty(self.repetition_penalty));
        }
        Ok(())
    }
}

/// CTRL-style penalty: logits of tokens seen before are divided by `rho` when
/// positive and multiplied by it when negative.
pub fn apply_repetition_penalty(logits: &mut [f32], history: &HashSet<u32>, rho: f32) -> Result<()> {
    if !(rho >= 1.0) {
        return Err(Error::InvalidPenalty(rho));
    }
    if rho == 1.0 {
        return Ok(());
    }
    for &t in history {
        if let Some(l) = logits.get_mut(t as usize) {
            if *l > 0.0 {
                *l /= rho;
            } else {
                *l *= rho;
            }
        }
    }
    Ok(())
}

/// Penalised greedy choice from one logits row.
pub fn greedy_pick(logits: &[f32], history: &HashSet<u32>, rho: f32) -> Result<u32> {
    let mut row = logits.to_vec();
    apply_repetition_penalty(&mut row, history, rho)?;
    Ok(argmax(&row) as u32)
}

/// Greedy continuation of `prompt`; returns only the new tokens.
pub fn generate(w: &ModelWeights, prompt: &[u32], params: &DecodeParams) -> Result<Vec<u32>> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    let total = prompt.len() + params.max_new_tokens;
    if total > w.config.max_context {
        return Err(Error::ContextOverflow { len: total, max: w.config.max_context });
    }
    let mut cache = KvCache::new(&w.config);
    let mut history: HashSet<u32> = HashSet::new();
    let mut last = None;
    for &t in prompt {
        last = Some(w.decode_step(&mut cache, t)?);
        history.insert(t);
    }
    let mut out = Vec::with_capacity(params.max_new_tokens);
    for step in 0..params.max_new_tokens {
        let logits = &last.as_ref().expect("prompt is non-empty").logits;
        let next = greedy_pick(logits, &history, params.repetition_penalty)?;
        out.push(next);
        history.insert(next);
        if step + 1 < params.max_new_tokens {
            last = Some(w.decode_step(&mut cache, next)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ctrl_penalty_examples() {
        let hist: HashSet<u32> = [0, 1].into_iter().collect();
        let mut l = vec![2.0, -1.0, 3.0];
        apply_repetition_penalty(&mut l, &hist, 1.2).unwrap();
        assert!((l[0] - 1.666_666_7).abs() < 1e-4);
        assert!((l[1] + 1.2).abs() < 1e-6);
        assert_eq!(l[2], 3.0);

        let mut same = vec![2.0, -1.0, 3.0];
        apply_repetition_penalty(&mut same, &hist, 1.0).unwrap();
        assert_eq!(same, vec![2.0, -1.0, 3.0]);

        assert!(matches!(
            apply_repetition_penalty(&mut same, &hist, 0.9),
            Err(Error::InvalidPenalty(_))
        ));
    }
}
