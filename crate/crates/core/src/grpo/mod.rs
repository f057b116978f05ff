//! Group-relative policy optimization.
//!
//! Rewards are assigned per finished generation. Each prompt's group of G
//! generations is normalized to advantages (reward minus group mean,
//! divided by the population standard deviation unless reward scaling is
//! off), then one clipped-ratio update is applied per batch. Sampling-time
//! log-probs serve as the old policy, so each batch performs exactly one
//! inner iteration and ratios start at 1.
//!
//! The optional reference-divergence penalty uses the k3 estimator and is
//! added to the loss, not folded into rewards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::adam::{optimizer_step, Adam, AdamConfig};
use crate::lm::loss::{loss_and_gradients, LossSpec, SurrogateSample};
use crate::lm::model::Model;
use crate::lm::sampler::{sample_sequence, SamplerConfig};
use crate::score::{covo_score, CovoBreakdown, CovoConfig};
use crate::tasks::TaskStream;
use crate::tensor::Elem;
use crate::derive_seed;

pub use crate::lm::loss::{clipped_term, k3_divergence};

const STD_FLOOR: f64 = 1e-8;

/// Reward -> advantage normalization within one group. Population standard
/// deviation; a degenerate group (std below 1e-8) yields all zeros. With
/// `scale` off only the mean is removed.
pub fn group_advantages(rewards: &[f64], scale: bool) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("empty reward group".into()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite reward in group".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !scale {
        return Ok(centered);
    }
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    if std < STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.iter().map(|c| c / std).collect())
}

/// Clipped surrogate value of a batch, computed from scratch through
/// `sequence_scores`. Mirrors the loss path arithmetic independently; the
/// divergence penalty is not included.
pub fn clipped_objective<F: Elem>(
    model: &Model<F>,
    samples: &[SurrogateSample],
    clip_epsilon: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty surrogate batch".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let ss = model.sequence_scores(&s.tokens[..s.prompt_len], &s.tokens[s.prompt_len..])?;
        let mut gen_mean = 0.0;
        for (j, &cur) in ss.logps.iter().enumerate() {
            let ratio = (cur - s.old_logps[j]).exp();
            gen_mean += clipped_term(ratio, s.advantage, clip_epsilon);
        }
        total += gen_mean / ss.logps.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub group_size: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub scale_rewards: bool,
    pub w_covo: f64,
    pub w_ext: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            group_size: 4,
            batch_size: 4,
            grad_accum: 8,
            clip_epsilon: 0.2,
            beta: 0.0,
            learning_rate: 1e-5,
            max_grad_norm: 100.0,
            scale_rewards: true,
            w_covo: 1.0,
            w_ext: 0.0,
            seed: 1,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(
                "group size must be at least 2 for group-relative advantages".into(),
            ));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip epsilon must be positive".into()));
        }
        if self.beta < 0.0 || self.w_covo < 0.0 || self.w_ext < 0.0 {
            return Err(Error::Config("beta and reward weights must be non-negative".into()));
        }
        self.sampler.validate()
    }
}

/// Per-update training record. One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_s_v: f64,
    pub mean_s_o: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub overflow_count: u64,
    pub mean_extrinsic: f64,
}

impl StepMetrics {
    pub fn all_finite(&self) -> bool {
        self.mean_reward.is_finite()
            && self.mean_s_v.is_finite()
            && self.mean_s_o.is_finite()
            && self.mean_kl.is_finite()
            && self.clip_fraction.is_finite()
            && self.mean_extrinsic.is_finite()
    }
}

/// One sampled generation with everything the update needs.
struct Rollout {
    tokens: Vec<u32>,
    prompt_len: usize,
    old_logps: Vec<f64>,
    ref_logps: Option<Vec<f64>>,
    breakdown: CovoBreakdown,
    extrinsic: f64,
    reward: f64,
    advantage: f64,
    overflow: bool,
}

pub struct Trainer<'a, F: Elem> {
    policy: Model<F>,
    reference: &'a Model<F>,
    task: &'a dyn TaskStream,
    covo: &'a CovoConfig,
    settings: TrainSettings,
    opt: Adam<F>,
    update: u64,
}

impl<'a, F: Elem> Trainer<'a, F> {
    pub fn new(
        policy: Model<F>,
        reference: &'a Model<F>,
        task: &'a dyn TaskStream,
        covo: &'a CovoConfig,
        settings: TrainSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if !policy.vocab().same_as(reference.vocab()) {
            return Err(Error::Config(
                "policy and reference must share a vocabulary".into(),
            ));
        }
        let opt = Adam::new(policy.params(), AdamConfig::default());
        Ok(Trainer {
            policy,
            reference,
            task,
            covo,
            settings,
            opt,
            update: 0,
        })
    }

    pub fn policy(&self) -> &Model<F> {
        &self.policy
    }

    pub fn into_policy(self) -> Model<F> {
        self.policy
    }

    pub fn updates_done(&self) -> u64 {
        self.update
    }

    /// Scores one generation for reward purposes. A generation that trims
    /// to nothing (immediate `<eos>`) contributes zero on both directions
    /// instead of failing the whole batch.
    fn reward_breakdown(&self, prompt: &crate::lm::vocab::TokenSequence, gen: &[u32]) -> Result<CovoBreakdown> {
        let trimmed = crate::score::trim_generation(self.policy.vocab(), gen);
        if trimmed.is_empty() {
            return Ok(CovoBreakdown {
                s_v: 0.0,
                s_o: 0.0,
                total: 0.0,
            });
        }
        covo_score(self.reference, prompt, gen, self.covo)
    }

    fn rollout_group(&self, prompt_index: u64) -> Result<Vec<Rollout>> {
        let s = &self.settings;
        let tp = self.task.prompt(prompt_index)?;
        let mut group = Vec::with_capacity(s.group_size);
        for g in 0..s.group_size {
            let seed = derive_seed(s.seed, &[self.update, prompt_index, g as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = sample_sequence(&self.policy, &tp.prompt.ids, &s.sampler, &mut rng)?;
            if out.tokens.is_empty() {
                return Err(Error::Numeric("sampler returned an empty generation".into()));
            }
            let breakdown = self.reward_breakdown(&tp.prompt, &out.tokens)?;
            let text = self.policy.vocab().detokenize(&out.tokens)?;
            let extrinsic = self.task.extrinsic_reward(prompt_index, &text);
            let reward = s.w_covo * breakdown.total + s.w_ext * extrinsic;
            let mut tokens = tp.prompt.ids.clone();
            tokens.extend_from_slice(&out.tokens);
            let ref_logps = if s.beta > 0.0 {
                Some(
                    self.reference
                        .sequence_scores(&tp.prompt.ids, &out.tokens)?
                        .logps,
                )
            } else {
                None
            };
            group.push(Rollout {
                tokens,
                prompt_len: tp.prompt.ids.len(),
                old_logps: out.logps,
                ref_logps,
                breakdown,
                extrinsic,
                reward,
                advantage: 0.0,
                overflow: out.overflow,
            });
        }
        let advantages =
            group_advantages(&group.iter().map(|r| r.reward).collect::<Vec<_>>(), s.scale_rewards)?;
        for (r, a) in group.iter_mut().zip(advantages) {
            r.advantage = a;
        }
        Ok(group)
    }

    /// One optimizer update over batch_size * grad_accum prompts. Prompt
    /// indices advance deterministically with the update counter.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let s = self.settings.clone();
        let prompts_per_update = (s.batch_size * s.grad_accum) as u64;
        let base = self.update * prompts_per_update;

        let mut grads = self.policy.params().zeros_like();
        let mut reward_sum = 0.0;
        let mut sv_sum = 0.0;
        let mut so_sum = 0.0;
        let mut ext_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut clip_sum = 0.0;
        let mut overflow_count = 0u64;
        let mut gen_count = 0usize;

        for micro in 0..s.grad_accum {
            let mut rollouts: Vec<Rollout> = Vec::new();
            for slot in 0..s.batch_size {
                let idx = base + (micro * s.batch_size + slot) as u64;
                rollouts.extend(self.rollout_group(idx)?);
            }
            for r in &rollouts {
                reward_sum += r.reward;
                sv_sum += r.breakdown.s_v;
                so_sum += r.breakdown.s_o;
                ext_sum += r.extrinsic;
                overflow_count += r.overflow as u64;
                gen_count += 1;
            }
            let samples: Vec<SurrogateSample> = rollouts
                .iter()
                .map(|r| SurrogateSample {
                    tokens: &r.tokens,
                    prompt_len: r.prompt_len,
                    old_logps: &r.old_logps,
                    ref_logps: r.ref_logps.as_deref(),
                    advantage: r.advantage,
                })
                .collect();
            let out = loss_and_gradients(
                &self.policy,
                &LossSpec::Grpo {
                    samples: &samples,
                    clip_epsilon: s.clip_epsilon,
                    beta: s.beta,
                },
            )?;
            grads.add_scaled(&out.grads, 1.0 / s.grad_accum as f64);
            kl_sum += out.mean_kl;
            clip_sum += out.clip_fraction;
        }

        optimizer_step(
            &mut self.policy,
            &mut self.opt,
            &mut grads,
            s.learning_rate,
            s.max_grad_norm,
        );
        self.update += 1;

        let n = gen_count as f64;
        let metrics = StepMetrics {
            step: self.update,
            mean_reward: reward_sum / n,
            mean_s_v: sv_sum / n,
            mean_s_o: so_sum / n,
            mean_kl: kl_sum / s.grad_accum as f64,
            clip_fraction: clip_sum / s.grad_accum as f64,
            overflow_count,
            mean_extrinsic: ext_sum / n,
        };
        if !metrics.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training metric at step {}",
                metrics.step
            )));
        }
        Ok(metrics)
    }
}
