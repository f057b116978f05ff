//! Run configuration: one TOML file drives every stage.
//!
//! Loading order: built-in defaults, then the config file, then a preset,
//! then `key.path=value` overrides, then an explicit seed. Later layers win.
//! The fully resolved configuration is echoed next to the run outputs so a
//! result can always be traced back to the exact settings that produced it.

use crate::error::{Error, Result};
use crate::lm::model::ModelConfig;
use crate::lm::sampler::SamplerConfig;
use crate::lm::vocab::Vocabulary;
use crate::score::{CovoConfig, ReverseTemplate, ValueTargetSelector};
use crate::tensor::Dtype;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const DEFAULT_CHARSET: &str = "\n abcdefghijklmnopqrstuvwxyz0123456789:+-";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_batches: usize,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub optimizer: String,
    pub learning_rate: f64,
    pub max_gradient_norm: f64,
    /// Inner epochs per rollout batch. Only the single-iteration schedule
    /// is implemented; anything else is rejected up front.
    pub training_iterations: usize,
    pub scale_rewards: bool,
    pub beta: f64,
    pub num_generations: usize,
    pub reward_correct_answer: f64,
    pub clip_epsilon: f64,
    pub inference_seeds: Vec<u64>,
    pub model: ModelSection,
    pub task: TaskSection,
    pub covo: CovoSection,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    pub reward: RewardSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            total_batches: 100,
            batch_size: 4,
            gradient_accumulation_steps: 8,
            max_new_tokens: 256,
            temperature: 1.0,
            top_k: 0,
            optimizer: "adam".into(),
            learning_rate: 1e-5,
            max_gradient_norm: 100.0,
            training_iterations: 1,
            scale_rewards: true,
            beta: 0.05,
            num_generations: 4,
            reward_correct_answer: 1.0,
            clip_epsilon: 0.2,
            inference_seeds: vec![1, 42, 121],
            model: ModelSection::default(),
            task: TaskSection::default(),
            covo: CovoSection::default(),
            pretrain: PretrainSection::default(),
            eval: EvalSection::default(),
            reward: RewardSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub tied_head: bool,
    pub final_norm: bool,
    pub dtype: String,
    pub charset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dim: 64,
            layers: 2,
            heads: 2,
            context: 128,
            tied_head: true,
            final_norm: true,
            dtype: "f32".into(),
            charset: DEFAULT_CHARSET.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// "styled" or "arithmetic".
    pub family: String,
    pub operand_max: u32,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            family: "styled".into(),
            operand_max: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovoSection {
    pub lambda_v: f64,
    pub lambda_o: f64,
    pub normalize_by_row_max: bool,
    /// Empty strings inherit the task family's template and selector.
    pub reverse_template: String,
    pub value_target_start: String,
    pub value_target_end: String,
    /// Overrides any selector and scores the value term on the full prompt.
    pub value_target_full: bool,
}

impl Default for CovoSection {
    fn default() -> Self {
        CovoSection {
            lambda_v: 1.0,
            lambda_o: 1.0,
            normalize_by_row_max: true,
            reverse_template: String::new(),
            value_target_start: String::new(),
            value_target_end: String::new(),
            value_target_full: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_docs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub generate_corpus: bool,
    /// JSONL file used when generate_corpus is false.
    pub corpus_path: String,
    pub corpus_seed: u64,
    pub docs_per_pair: usize,
    pub reverse_per_pair: usize,
    pub corpus_operand_max: u32,
    pub reverse_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 30,
            batch_docs: 8,
            learning_rate: 3e-3,
            seed: 7,
            generate_corpus: true,
            corpus_path: String::new(),
            corpus_seed: 7,
            docs_per_pair: 4,
            reverse_per_pair: 2,
            corpus_operand_max: 9,
            reverse_every: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub prompts: usize,
    pub max_new_tokens: usize,
    /// Novelty reference decoding. True compares sampled outputs against
    /// the reference's greedy decode; false samples the reference with the
    /// same derived stream as each policy draw, so an untouched policy
    /// scores exactly zero novelty.
    pub greedy_reference: bool,
    /// "test" measures generalization on held-out prompts; "train"
    /// measures in-distribution behavior, where diversity collapse under
    /// pure extrinsic optimization actually shows up.
    pub pool: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prompts: 25,
            max_new_tokens: 64,
            greedy_reference: true,
            pool: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub w_covo: f64,
    pub w_ext: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            w_covo: 1.0,
            w_ext: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: String,
    /// Policy initialization; empty means the pretrained checkpoint under
    /// the output directory.
    pub checkpoint: String,
    /// Frozen scoring model; empty means the same as the policy init.
    pub reference: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: "out".into(),
            checkpoint: String::new(),
            reference: String::new(),
        }
    }
}

/// Named reward mixtures: the KL weight and the two reward weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Covo,
    CovoKl,
    Ext,
    CovoExt,
    CovoExtKl,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Covo,
        Preset::CovoKl,
        Preset::Ext,
        Preset::CovoExt,
        Preset::CovoExtKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Covo => "covo",
            Preset::CovoKl => "covo-kl",
            Preset::Ext => "ext",
            Preset::CovoExt => "covo-ext",
            Preset::CovoExtKl => "covo-ext-kl",
        }
    }

    /// (beta, w_covo, w_ext)
    pub fn weights(self) -> (f64, f64, f64) {
        match self {
            Preset::Covo => (0.0, 1.0, 0.0),
            Preset::CovoKl => (0.05, 1.0, 0.0),
            Preset::Ext => (0.0, 0.0, 1.0),
            Preset::CovoExt => (0.0, 1.0, 1.0),
            Preset::CovoExtKl => (0.05, 1.0, 1.0),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset {s:?}, expected one of {names:?}"))
            })
    }
}

/// Installs `value` at the dotted `path`, creating tables on the way. The
/// value text is parsed as TOML; anything that does not parse is kept as a
/// plain string, so quoting is optional for string-valued keys.
fn set_path(table: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let mut parts = path.split('.').collect::<Vec<_>>();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let leaf = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override path {path:?} crosses a non-table value"))
        })?;
    }
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    node.insert(leaf.to_string(), parsed);
    Ok(())
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Resolves every configuration layer. `sets` holds `path=value` pairs.
    pub fn load(
        file: Option<&Path>,
        preset: Option<Preset>,
        seed: Option<u64>,
        sets: &[String],
    ) -> Result<RunConfig> {
        let defaults = toml::to_string(&RunConfig::default())
            .expect("defaults serialize")
            .parse::<toml::Table>()
            .expect("defaults reparse");
        let mut table = defaults;
        if let Some(path) = file {
            let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_table = raw
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge_tables(&mut table, file_table);
        }
        if let Some(p) = preset {
            let (beta, w_covo, w_ext) = p.weights();
            set_path(&mut table, "beta", &beta.to_string())?;
            set_path(&mut table, "reward.w_covo", &w_covo.to_string())?;
            set_path(&mut table, "reward.w_ext", &w_ext.to_string())?;
        }
        for s in sets {
            let (path, value) = s.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {s:?} is not of the form key.path=value"))
            })?;
            set_path(&mut table, path.trim(), value.trim())?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.dtype()?;
        Vocabulary::from_charset(&self.model.charset)?;
        if self.optimizer != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer {:?}, only \"adam\" is implemented",
                self.optimizer
            )));
        }
        if self.training_iterations != 1 {
            return Err(Error::Config(
                "training_iterations must be 1; multiple inner epochs are not implemented".into(),
            ));
        }
        if self.total_batches == 0 {
            return Err(Error::Config("total_batches must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.max_gradient_norm > 0.0) {
            return Err(Error::Config("max_gradient_norm must be positive".into()));
        }
        if self.inference_seeds.is_empty() {
            return Err(Error::Config("inference_seeds must not be empty".into()));
        }
        if self.reward.w_covo <= 0.0 && self.reward.w_ext <= 0.0 {
            return Err(Error::Config(
                "at least one of reward.w_covo and reward.w_ext must be positive".into(),
            ));
        }
        if self.task.family != "styled" && self.task.family != "arithmetic" {
            return Err(Error::Config(format!(
                "unknown task family {:?}, expected \"styled\" or \"arithmetic\"",
                self.task.family
            )));
        }
        if self.eval.prompts == 0 {
            return Err(Error::Config("eval.prompts must be positive".into()));
        }
        if self.eval.pool != "test" && self.eval.pool != "train" {
            return Err(Error::Config(format!(
                "eval.pool must be \"test\" or \"train\", got {:?}",
                self.eval.pool
            )));
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_docs == 0 {
            return Err(Error::Config(
                "pretrain.epochs and pretrain.batch_docs must be positive".into(),
            ));
        }
        if !self.pretrain.generate_corpus && self.pretrain.corpus_path.is_empty() {
            return Err(Error::Config(
                "pretrain.corpus_path is required when generate_corpus is false".into(),
            ));
        }
        self.train_settings()?.validate()?;
        self.covo_config()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<Dtype> {
        Dtype::parse(&self.model.dtype).ok_or_else(|| {
            Error::Config(format!(
                "unknown dtype {:?}, expected \"f32\" or \"f64\"",
                self.model.dtype
            ))
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            dim: self.model.dim,
            layers: self.model.layers,
            heads: self.model.heads,
            context: self.model.context,
            tied_head: self.model.tied_head,
            final_norm: self.model.final_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            greedy: false,
        }
    }

    pub fn train_settings(&self) -> Result<crate::grpo::TrainSettings> {
        Ok(crate::grpo::TrainSettings {
            group_size: self.num_generations,
            batch_size: self.batch_size,
            grad_accum: self.gradient_accumulation_steps,
            clip_epsilon: self.clip_epsilon,
            beta: self.beta,
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_gradient_norm,
            scale_rewards: self.scale_rewards,
            w_covo: self.reward.w_covo,
            w_ext: self.reward.w_ext,
            seed: self.seed,
            sampler: self.sampler_config(),
        })
    }

    /// Scoring setup; template and selector fall back to what the task
    /// family's reverse corpus documents teach.
    pub fn covo_config(&self) -> Result<CovoConfig> {
        let (template, target) = match self.task.family.as_str() {
            "styled" => (
                "{output}\nthis is a ".to_string(),
                ValueTargetSelector::Between {
                    start: Some("write a ".into()),
                    end: Some(" poem".into()),
                },
            ),
            _ => (
                "{output}from q: ".to_string(),
                ValueTargetSelector::Between {
                    start: Some("q: ".into()),
                    end: None,
                },
            ),
        };
        let template = if self.covo.reverse_template.is_empty() {
            template
        } else {
            self.covo.reverse_template.clone()
        };
        let target = if self.covo.value_target_full {
            ValueTargetSelector::Full
        } else if !self.covo.value_target_start.is_empty() {
            ValueTargetSelector::Between {
                start: Some(self.covo.value_target_start.clone()),
                end: if self.covo.value_target_end.is_empty() {
                    None
                } else {
                    Some(self.covo.value_target_end.clone())
                },
            }
        } else {
            target
        };
        Ok(CovoConfig {
            lambda_v: self.covo.lambda_v,
            lambda_o: self.covo.lambda_o,
            reverse_template: ReverseTemplate::parse(&template)?,
            value_target: target,
            normalize_by_row_max: self.covo.normalize_by_row_max,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
