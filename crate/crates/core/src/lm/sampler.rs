//! Ancestral sampling from the policy.
//!
//! Temperature rescales the logits, top-k restricts to the k most probable
//! tokens (ties resolved toward the lowest index, so top-k 1 reproduces
//! greedy decoding), then one token is drawn by walking the cumulative
//! distribution in f64. Generation stops at `<eos>` or when the budget or
//! the context window runs out, in which case the overflow flag is set.
//!
//! Recorded per-token log-probs are the model's own (untempered) values;
//! they are what ratio-based training treats as the sampling policy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Elem;

use super::model::Model;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// 0 keeps the full distribution.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: 0,
            max_new_tokens: 256,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Generated ids only; includes the terminal `<eos>` when one was drawn.
    pub tokens: Vec<u32>,
    /// Model log-prob of each generated token under the full distribution.
    pub logps: Vec<f64>,
    /// True when generation stopped without `<eos>`.
    pub overflow: bool,
}

/// First index holding the row maximum.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from a log-prob row under temperature and top-k.
pub fn draw_token(row: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    let n = row.len();
    let mut kept: Vec<usize> = (0..n).collect();
    if top_k > 0 && top_k < n {
        kept.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        kept.truncate(top_k);
        kept.sort_unstable();
    }
    // Softmax over the kept candidates at the given temperature.
    let scaled: Vec<f64> = kept.iter().map(|&i| row[i] / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return kept[j];
        }
    }
    *kept.last().expect("non-empty candidate set")
}

/// Samples a continuation of `prompt`. The prompt itself is not echoed in
/// the output tokens.
pub fn sample_sequence<F: Elem>(
    model: &Model<F>,
    prompt: &[u32],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("sampling needs a non-empty prompt".into()));
    }
    if prompt.len() >= model.config().context {
        return Err(Error::InvalidInput(format!(
            "prompt length {} leaves no room in context {}",
            prompt.len(),
            model.config().context
        )));
    }
    let eos = model.vocab().eos_id();
    let mut trace = model.forward(prompt)?;
    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    let mut overflow = true;
    for _ in 0..cfg.max_new_tokens {
        // The next token would sit at position trace.len(); stop while the
        // whole prompt + generation still fits the context window.
        if trace.len() == model.config().context {
            break;
        }
        let row = trace.logprob_row(trace.len() - 1);
        let tok = if cfg.greedy {
            argmax_first(&row)
        } else {
            draw_token(&row, cfg.temperature, cfg.top_k, rng)
        } as u32;
        tokens.push(tok);
        logps.push(row[tok as usize]);
        if tok == eos {
            overflow = false;
            break;
        }
        model.advance(&mut trace, tok)?;
    }
    Ok(SampleOutput {
        tokens,
        logps,
        overflow,
    })
}
