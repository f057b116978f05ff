//! Training objectives: cross-entropy over documents and the clipped
//! ratio surrogate over sampled generations.
//!
//! Both return the scalar loss together with parameter gradients from one
//! backward pass. Per-token log-probs are taken from the f64 rows; logit
//! gradients are assembled in working precision. Gradient descent on the
//! returned loss maximizes the surrogate objective.

use crate::error::{Error, Result};
use crate::tensor::Elem;

use super::model::{Model, Params};

/// min(r*A, clamp(r, 1-eps, 1+eps)*A), the pessimistic per-token term.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// k3 divergence estimate exp(d) - d - 1 with d = ref_logp - cur_logp.
/// Non-negative for every d; zero only at d = 0.
pub fn k3_divergence(ref_logp: f64, cur_logp: f64) -> f64 {
    let d = ref_logp - cur_logp;
    d.exp() - d - 1.0
}

/// One generation inside a surrogate batch. `tokens` is prompt followed by
/// the generated ids (including a terminal `<eos>` when present);
/// `old_logps` and `ref_logps` align with the generated part.
#[derive(Clone, Debug)]
pub struct SurrogateSample<'a> {
    pub tokens: &'a [u32],
    pub prompt_len: usize,
    pub old_logps: &'a [f64],
    pub ref_logps: Option<&'a [f64]>,
    pub advantage: f64,
}

pub enum LossSpec<'a> {
    /// Teacher-forced next-token prediction, averaged over all predicted
    /// positions of all documents. Documents need at least two tokens.
    CrossEntropy { docs: &'a [Vec<u32>] },
    /// Clipped ratio objective with optional reference-divergence penalty.
    /// The loss is the negated objective.
    Grpo {
        samples: &'a [SurrogateSample<'a>],
        clip_epsilon: f64,
        beta: f64,
    },
}

#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub loss: f64,
    pub grads: Params<F>,
    /// Fraction of generated tokens where the clipped branch was the
    /// active minimum. Zero for cross-entropy.
    pub clip_fraction: f64,
    /// Mean per-generation k3 divergence against the reference. Zero when
    /// no reference log-probs are supplied.
    pub mean_kl: f64,
}

pub fn loss_and_gradients<F: Elem>(model: &Model<F>, spec: &LossSpec) -> Result<LossOutput<F>> {
    match spec {
        LossSpec::CrossEntropy { docs } => cross_entropy(model, docs),
        LossSpec::Grpo {
            samples,
            clip_epsilon,
            beta,
        } => grpo_surrogate(model, samples, *clip_epsilon, *beta),
    }
}

fn cross_entropy<F: Elem>(model: &Model<F>, docs: &[Vec<u32>]) -> Result<LossOutput<F>> {
    if docs.is_empty() {
        return Err(Error::InvalidInput("cross-entropy over zero documents".into()));
    }
    let total_positions: usize = docs.iter().map(|d| d.len().saturating_sub(1)).sum();
    if docs.iter().any(|d| d.len() < 2) {
        return Err(Error::InvalidInput(
            "cross-entropy documents need at least two tokens".into(),
        ));
    }
    let inv = 1.0 / total_positions as f64;
    let mut loss = 0.0;
    let mut grads = model.params().zeros_like();
    for doc in docs.iter() {
        let trace = model.forward(doc)?;
        let mut dlogits: Vec<Vec<F>> = Vec::with_capacity(doc.len());
        for t in 0..doc.len() {
            if t + 1 == doc.len() {
                dlogits.push(vec![F::zero(); model.vocab_size()]);
                continue;
            }
            let target = doc[t + 1] as usize;
            let row = trace.logprob_row(t);
            loss -= row[target] * inv;
            let mut drow: Vec<F> = row
                .iter()
                .map(|&lp| F::from_f64(lp.exp() * inv))
                .collect();
            drow[target] -= F::from_f64(inv);
            dlogits.push(drow);
        }
        let g = model.backward(&trace, &dlogits);
        grads.add_scaled(&g, 1.0);
    }
    Ok(LossOutput {
        loss,
        grads,
        clip_fraction: 0.0,
        mean_kl: 0.0,
    })
}

fn grpo_surrogate<F: Elem>(
    model: &Model<F>,
    samples: &[SurrogateSample],
    clip_epsilon: f64,
    beta: f64,
) -> Result<LossOutput<F>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("surrogate over zero samples".into()));
    }
    if !(clip_epsilon > 0.0) {
        return Err(Error::Config(format!(
            "clip epsilon must be positive, got {clip_epsilon}"
        )));
    }
    let batch = samples.len() as f64;
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut clipped_tokens = 0usize;
    let mut token_count = 0usize;
    let mut grads = model.params().zeros_like();

    for sample in samples {
        let gen_len = sample.tokens.len() - sample.prompt_len;
        if sample.prompt_len == 0 || gen_len == 0 {
            return Err(Error::InvalidInput(
                "surrogate sample needs a prompt and a generation".into(),
            ));
        }
        if sample.old_logps.len() != gen_len {
            return Err(Error::InvalidInput(format!(
                "old log-probs length {} does not match generation length {gen_len}",
                sample.old_logps.len()
            )));
        }
        if let Some(r) = sample.ref_logps {
            if r.len() != gen_len {
                return Err(Error::InvalidInput(
                    "reference log-probs length mismatch".into(),
                ));
            }
        }
        if !sample.advantage.is_finite() {
            return Err(Error::Numeric("non-finite advantage".into()));
        }

        let trace = model.forward(sample.tokens)?;
        let inv_len = 1.0 / gen_len as f64;
        let mut dlogits: Vec<Vec<F>> = (0..sample.tokens.len())
            .map(|_| vec![F::zero(); model.vocab_size()])
            .collect();
        let mut sample_obj = 0.0;
        let mut sample_kl = 0.0;
        for j in 0..gen_len {
            let pos = sample.prompt_len + j - 1;
            let target = sample.tokens[sample.prompt_len + j] as usize;
            let row = trace.logprob_row(pos);
            let cur = row[target];
            let ratio = (cur - sample.old_logps[j]).exp();
            let unclipped = ratio * sample.advantage;
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * sample.advantage;
            token_count += 1;
            let (term, dterm_dlogp) = if clipped < unclipped {
                clipped_tokens += 1;
                (clipped, 0.0)
            } else {
                (unclipped, ratio * sample.advantage)
            };
            sample_obj += term * inv_len;
            // d(objective)/d(cur_logp), per token, including the averages.
            let mut dobj = dterm_dlogp * inv_len / batch;
            if let Some(refs) = sample.ref_logps {
                let d = refs[j] - cur;
                sample_kl += (d.exp() - d - 1.0) * inv_len;
                dobj -= beta * (1.0 - d.exp()) * inv_len / batch;
            }
            // loss = -objective and d(logp)/d(logit_j) = delta_j - p_j, so
            // d(loss)/d(logit_j) = dobj * (p_j - delta_j).
            let drow = &mut dlogits[pos];
            for (v, slot) in drow.iter_mut().enumerate() {
                let p = row[v].exp();
                *slot += F::from_f64(dobj * (if v == target { p - 1.0 } else { p }));
            }
        }
        objective += sample_obj / batch;
        kl_total += sample_kl;
        let g = model.backward(&trace, &dlogits);
        grads.add_scaled(&g, 1.0);
    }

    let mean_kl = kl_total / batch;
    objective -= beta * mean_kl;
    Ok(LossOutput {
        loss: -objective,
        grads,
        clip_fraction: clipped_tokens as f64 / token_count as f64,
        mean_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::adam::{optimizer_step, Adam, AdamConfig};
    use crate::lm::model::{Model, ModelConfig};
    use crate::lm::vocab::Vocabulary;
    use std::sync::Arc;

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_charset("\nab").unwrap())
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            context: 16,
            tied_head: true,
            final_norm: true,
        }
    }

    #[test]
    fn clipped_term_hand_values() {
        // Inside the clip window both branches coincide.
        assert!((clipped_term(1.1, 1.0, 0.2) - 1.1).abs() < 1e-15);
        // Positive advantage, ratio above the window: clipped wins the min.
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        // Negative advantage keeps the pessimistic unclipped branch.
        assert!((clipped_term(1.5, -1.0, 0.2) - (-1.5)).abs() < 1e-15);
        assert!((clipped_term(0.5, 1.0, 0.2) - 0.5).abs() < 1e-15);
        // Negative advantage, ratio below the window: clipped is the min.
        assert!((clipped_term(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
    }

    #[test]
    fn k3_hand_values_and_nonnegativity() {
        assert!((k3_divergence(2f64.ln(), 0.0) - 0.3068528194400547).abs() < 1e-12);
        assert!((k3_divergence(0.5f64.ln(), 0.0) - 0.1931471805599453).abs() < 1e-12);
        assert_eq!(k3_divergence(-1.25, -1.25), 0.0);
        for i in -40..40 {
            let d = i as f64 * 0.1;
            assert!(k3_divergence(d, 0.0) >= 0.0);
        }
    }

    #[test]
    fn uniform_model_cross_entropy_is_log_vocab() {
        let v = vocab();
        let cfg = ModelConfig {
            tied_head: false,
            ..small_cfg()
        };
        let m: Model<f64> = Model::new(cfg, v.clone(), 1).unwrap();
        let docs = vec![vec![2u32, 3, 4, 1]];
        let out = loss_and_gradients(&m, &LossSpec::CrossEntropy { docs: &docs }).unwrap();
        assert!((out.loss - (v.size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_decreases_under_training() {
        let v = vocab();
        let mut m: Model<f32> = Model::new(small_cfg(), v, 3).unwrap();
        let docs = vec![vec![2u32, 3, 4, 3, 4, 1]];
        let mut opt = Adam::new(m.params(), AdamConfig::default());
        let first = loss_and_gradients(&m, &LossSpec::CrossEntropy { docs: &docs })
            .unwrap()
            .loss;
        let mut last = first;
        for _ in 0..60 {
            let mut out = loss_and_gradients(&m, &LossSpec::CrossEntropy { docs: &docs }).unwrap();
            optimizer_step(&mut m, &mut opt, &mut out.grads, 3e-3, 100.0);
            last = out.loss;
        }
        assert!(last < first - 0.5, "first {first} last {last}");
    }

    #[test]
    fn zero_advantage_gives_zero_gradients() {
        let v = vocab();
        let m: Model<f64> = Model::new(small_cfg(), v, 5).unwrap();
        let tokens = vec![2u32, 3, 4, 1];
        let ss = m.sequence_scores(&tokens[..1], &tokens[1..]).unwrap();
        let samples = vec![SurrogateSample {
            tokens: &tokens,
            prompt_len: 1,
            old_logps: &ss.logps,
            ref_logps: None,
            advantage: 0.0,
        }];
        let out = loss_and_gradients(
            &m,
            &LossSpec::Grpo {
                samples: &samples,
                clip_epsilon: 0.2,
                beta: 0.0,
            },
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        let mut all_zero = true;
        out.grads.visit(|_, t| {
            if t.data().iter().any(|&x| x != 0.0) {
                all_zero = false;
            }
        });
        assert!(all_zero);
    }

    #[test]
    fn surrogate_is_zero_at_the_sampling_policy() {
        let v = vocab();
        let m: Model<f64> = Model::new(small_cfg(), v, 8).unwrap();
        let t1 = vec![2u32, 3, 3, 1];
        let t2 = vec![2u32, 4, 1];
        let s1 = m.sequence_scores(&t1[..1], &t1[1..]).unwrap();
        let s2 = m.sequence_scores(&t2[..1], &t2[1..]).unwrap();
        let samples = vec![
            SurrogateSample {
                tokens: &t1,
                prompt_len: 1,
                old_logps: &s1.logps,
                ref_logps: None,
                advantage: 1.0,
            },
            SurrogateSample {
                tokens: &t2,
                prompt_len: 1,
                old_logps: &s2.logps,
                ref_logps: None,
                advantage: -1.0,
            },
        ];
        let out = loss_and_gradients(
            &m,
            &LossSpec::Grpo {
                samples: &samples,
                clip_epsilon: 0.2,
                beta: 0.0,
            },
        )
        .unwrap();
        // Ratios are exactly 1, so the objective is the mean advantage.
        assert!(out.loss.abs() < 1e-12, "loss {}", out.loss);
        assert_eq!(out.clip_fraction, 0.0);
        assert_eq!(out.mean_kl, 0.0);
    }

    #[test]
    fn kl_penalty_appears_in_loss_and_is_nonnegative() {
        let v = vocab();
        let m: Model<f64> = Model::new(small_cfg(), v.clone(), 8).unwrap();
        let reference: Model<f64> = Model::new(small_cfg(), v, 13).unwrap();
        let tokens = vec![2u32, 3, 4, 1];
        let ss = m.sequence_scores(&tokens[..1], &tokens[1..]).unwrap();
        let rs = reference.sequence_scores(&tokens[..1], &tokens[1..]).unwrap();
        let samples = vec![SurrogateSample {
            tokens: &tokens,
            prompt_len: 1,
            old_logps: &ss.logps,
            ref_logps: Some(&rs.logps),
            advantage: 0.0,
        }];
        let beta = 0.05;
        let out = loss_and_gradients(
            &m,
            &LossSpec::Grpo {
                samples: &samples,
                clip_epsilon: 0.2,
                beta,
            },
        )
        .unwrap();
        assert!(out.mean_kl > 0.0);
        assert!((out.loss - beta * out.mean_kl).abs() < 1e-12);
    }

    /// Quick finite-difference probe of both losses on an f64 model.
    /// The exhaustive sweep lives in the acceptance suite.
    #[test]
    fn gradients_match_finite_differences_spot_check() {
        let v = vocab();
        let cfg = ModelConfig {
            dim: 4,
            layers: 1,
            heads: 1,
            context: 8,
            tied_head: true,
            final_norm: true,
        };
        let m: Model<f64> = Model::new(cfg.clone(), v, 17).unwrap();
        let docs = vec![vec![2u32, 3, 4, 3, 1]];

        let ce_loss = |model: &Model<f64>| {
            loss_and_gradients(model, &LossSpec::CrossEntropy { docs: &docs })
                .unwrap()
                .loss
        };
        let out = loss_and_gradients(&m, &LossSpec::CrossEntropy { docs: &docs }).unwrap();
        let h = 1e-6;
        for name in ["wte", "block0.wq", "block0.fc1"] {
            let idx = 3.min(m.params().tensor(name).unwrap().len() - 1);
            let analytic = out.grads.tensor(name).unwrap().data()[idx];
            let mut plus = m.clone();
            plus.params_mut().tensor_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = m.clone();
            minus.params_mut().tensor_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (ce_loss(&plus) - ce_loss(&minus)) / (2.0 * h);
            let denom = (analytic.abs() + numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "{name}[{idx}]: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn surrogate_rejects_malformed_samples() {
        let v = vocab();
        let m: Model<f64> = Model::new(small_cfg(), v, 8).unwrap();
        let tokens = vec![2u32, 3];
        let logps = vec![-0.5];
        let bad = vec![SurrogateSample {
            tokens: &tokens,
            prompt_len: 2,
            old_logps: &logps,
            ref_logps: None,
            advantage: 1.0,
        }];
        assert!(loss_and_gradients(
            &m,
            &LossSpec::Grpo {
                samples: &bad,
                clip_epsilon: 0.2,
                beta: 0.0
            }
        )
        .is_err());
    }
}
