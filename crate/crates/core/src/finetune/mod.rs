//! Two-stage fine-tuning: captioning first, then VQA, with only the projector
//! and the LoRA factors trainable.
//!
//! Config file (TOML). Every `ModelConfig` field may appear under `[model]`;
//! missing ones take the toy defaults. Relative `dataset_path`s resolve against
//! the config file's directory.
//!
//! ```toml
//! [model]
//! lora_rank = 4
//!
//! [stage]
//! stage = 2
//! epochs = 50
//! batch_size = 1
//! weight_decay = 0.05
//! seed = 0
//! dataset_path = "vqa.jsonl"
//! # max_steps = 300
//!
//! [stage.schedule]
//! max_lr = 1e-5
//! warmup_lr = 1e-6
//! min_lr = 0.0
//! # warmup_steps defaults to one epoch
//! ```

pub mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};

use glob::Pattern;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, load_image, DataError, ImageConfig, Split};
use crate::model::tokenizer::EOS;
use crate::model::{Model, ModelConfig, ModelError};
use crate::optim::{AdamWConfig, OptimizerState, ScheduleConfig, ScheduleError};
use crate::prompt::{
    assemble_caption_prompt, assemble_random_caption_prompt, assemble_vqa_prompt, prompt_token_ids, splice_ids,
    AssembledPrompt, InstructionPool, PromptError,
};
use crate::tensor::{Tape, Tensor, TensorError, Var, IGNORE_INDEX};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

/// Environment variable naming the directory that receives checkpoints and reports.
pub const RUN_DIR_ENV: &str = "MEDVQA_RUN_DIR";

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("freeze policy selects no parameters")]
    EmptyTrainableSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("target text is empty")]
    EmptyTarget,
    #[error("non-finite loss or gradient at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, FinetuneError>;

/// Name patterns (`*` wildcard) of the parameters that train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_names: Vec<String>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            trainable_names: vec!["projector.*".into(), "*.lora_A".into(), "*.lora_B".into()],
        }
    }
}

/// Marks matching parameters trainable and everything else frozen. Returns the
/// trainable names in store order.
pub fn apply_freeze_policy(model: &mut Model, policy: &FreezePolicy) -> Result<Vec<String>> {
    let patterns = policy
        .trainable_names
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| FinetuneError::Config(format!("pattern `{p}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut trainable = Vec::new();
    for name in names {
        let on = patterns.iter().any(|p| p.matches(&name));
        model.params.set_trainable(&name, on)?;
        if on {
            trainable.push(name);
        }
    }
    if trainable.is_empty() {
        return Err(FinetuneError::EmptyTrainableSet);
    }
    Ok(trainable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub lora_total: usize,
    pub projector_total: usize,
    pub grand_total: usize,
}

/// Element counts of the trainable parameters, by group.
pub fn count_trainable(model: &Model) -> ParamCounts {
    let (mut lora, mut proj, mut total) = (0, 0, 0);
    for p in model.params.iter().filter(|p| p.trainable) {
        let n = p.tensor.numel();
        total += n;
        if p.name.starts_with("projector.") {
            proj += n;
        } else if p.name.ends_with(".lora_A") || p.name.ends_with(".lora_B") {
            lora += n;
        }
    }
    ParamCounts {
        lora_total: lora,
        projector_total: proj,
        grand_total: total,
    }
}

/// The same counts from the config alone, without allocating any weights.
pub fn count_trainable_for_config(cfg: &ModelConfig) -> ParamCounts {
    // A is (r, d) and B is (d, r) for every adapted projection in every layer
    let lora = cfg.n_layers_lm * cfg.lora_targets.len() * 2 * cfg.d_lm * cfg.lora_rank;
    let proj = cfg.group_size * cfg.d_vis * cfg.d_lm + cfg.d_lm;
    ParamCounts {
        lora_total: lora,
        projector_total: proj,
        grand_total: lora + proj,
    }
}

/// Projector size with the encoder width left symbolic.
pub fn projector_formula(cfg: &ModelConfig) -> String {
    format!("{}·d_vis·{} + {}", cfg.group_size, cfg.d_lm, cfg.d_lm)
}

/// Next-token labels for `prompt_len` prompt positions followed by the target:
/// the last prompt position predicts the first target token and the last
/// target position predicts EOS. All other prompt positions are ignored.
pub fn shifted_labels(prompt_len: usize, target_ids: &[usize]) -> Vec<i64> {
    assert!(prompt_len > 0, "prompt must be non-empty");
    let mut labels = vec![IGNORE_INDEX; prompt_len + target_ids.len()];
    for (k, &t) in target_ids.iter().chain(std::iter::once(&EOS)).enumerate() {
        labels[prompt_len - 1 + k] = t as i64;
    }
    labels
}

/// Mean cross-entropy over the target tokens plus EOS, with the prompt and
/// image positions masked. `features` is the grouped frozen encoder output.
pub fn compute_loss(
    tape: &mut Tape,
    model: &Model,
    prompt: &AssembledPrompt,
    features: &Tensor,
    target: &str,
) -> Result<Var> {
    if target.trim().is_empty() {
        return Err(FinetuneError::EmptyTarget);
    }
    let target_ids = model.tokenizer().tokenize(target);
    let (pre, post) = prompt_token_ids(model, prompt);
    let feats = tape.constant(features.clone());
    let visual = model.project_to_lm(tape, feats)?;
    let prompt_len = pre.len() + tape.value(visual).rows() + post.len();
    let tail: Vec<usize> = post.iter().chain(&target_ids).copied().collect();
    let embeds = splice_ids(tape, model, &pre, Some(visual), &tail)?;
    let logits = model.lm_forward(tape, embeds)?;
    Ok(tape.cross_entropy(logits, &shifted_labels(prompt_len, &target_ids))?)
}

/// Greedy answer for a prompt whose image slot takes `features`.
pub fn predict(model: &Model, prompt: &AssembledPrompt, features: &Tensor, max_new_tokens: usize) -> Result<String> {
    let mut tape = Tape::new();
    let feats = tape.constant(features.clone());
    let visual = model.project_to_lm(&mut tape, feats)?;
    let (pre, post) = prompt_token_ids(model, prompt);
    let embeds = splice_ids(&mut tape, model, &pre, Some(visual), &post)?;
    let ids = model.generate_greedy(tape.value(embeds), max_new_tokens)?;
    Ok(model.tokenizer().detokenize(&ids)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptSource {
    Fixed(AssembledPrompt),
    /// Stage-1 prompt with the instruction drawn from the pool at every visit.
    CaptionPool(InstructionPool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: Tensor,
    pub prompt: PromptSource,
    pub target: String,
}

impl TrainExample {
    pub fn vqa(model: &Model, image: &data::Image, question: &str, answer: &str) -> Result<Self> {
        Ok(Self {
            features: model.frozen_visual_features(image)?,
            prompt: PromptSource::Fixed(assemble_vqa_prompt(question)?),
            target: answer.to_string(),
        })
    }

    pub fn caption(model: &Model, image: &data::Image, caption: &str, pool: &InstructionPool) -> Result<Self> {
        assemble_caption_prompt(pool, 0)?;
        Ok(Self {
            features: model.frozen_visual_features(image)?,
            prompt: PromptSource::CaptionPool(pool.clone()),
            target: caption.to_string(),
        })
    }
}

/// Learning-rate settings; step counts are derived from the dataset when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub max_lr: f64,
    pub warmup_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: Option<u64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            max_lr: 1e-5,
            warmup_lr: 1e-6,
            min_lr: 0.0,
            warmup_steps: None,
        }
    }
}

impl ScheduleSpec {
    /// Warmup defaults to one epoch and is clamped so at least one step decays.
    pub fn resolve(&self, steps_per_epoch: u64, total_steps: u64) -> Result<ScheduleConfig> {
        if total_steps < 2 {
            return Err(FinetuneError::Config(format!(
                "a run needs at least 2 steps, got {total_steps}"
            )));
        }
        let warmup = self.warmup_steps.unwrap_or(steps_per_epoch).clamp(1, total_steps - 1);
        let s = ScheduleConfig {
            max_lr: self.max_lr,
            warmup_lr: self.warmup_lr,
            min_lr: self.min_lr,
            warmup_steps: warmup,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset_path: PathBuf,
    /// Stop after this many optimizer steps instead of `epochs` full passes.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub instructions: InstructionPool,
}

fn default_epochs() -> u64 {
    50
}
fn default_batch() -> usize {
    1
}
fn default_weight_decay() -> f64 {
    0.05
}

impl StageConfig {
    pub fn new(stage: u8, dataset_path: impl Into<PathBuf>) -> Self {
        Self {
            stage,
            epochs: default_epochs(),
            batch_size: default_batch(),
            schedule: ScheduleSpec::default(),
            weight_decay: default_weight_decay(),
            seed: 0,
            dataset_path: dataset_path.into(),
            max_steps: None,
            instructions: InstructionPool::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FinetuneError::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is invalid", self.weight_decay));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }
}

/// A config file: `[model]` plus `[stage]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub stage: StageConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FinetuneError::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.stage.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FinetuneError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.stage.dataset_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.stage.dataset_path = dir.join(&cfg.stage.dataset_path);
            }
        }
        Ok(cfg)
    }
}

/// Reads the stage's dataset and precomputes frozen image features: caption
/// records for Stage 1, the train split of a VQA file for Stage 2.
pub fn load_stage_examples(cfg: &StageConfig, model: &Model) -> Result<Vec<TrainExample>> {
    cfg.validate()?;
    let icfg = ImageConfig::with_size(model.config.image_size);
    let examples = if cfg.stage == 1 {
        data::load_caption_dataset(&cfg.dataset_path)?
            .iter()
            .map(|r| {
                let img = load_image(&r.image_path, &icfg)?;
                TrainExample::caption(model, &img, &r.caption, &cfg.instructions)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        data::load_vqa_dataset(&cfg.dataset_path)?
            .split(Split::Train)
            .iter()
            .map(|r| {
                let img = load_image(&r.image_path, &icfg)?;
                TrainExample::vqa(model, &img, &r.question, &r.answer)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub steps: u64,
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss of every completed or partial epoch.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub trainable_count: ParamCounts,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    /// Parameters whose bytes differ from the start of the run.
    pub changed_params: Vec<String>,
    pub trainable_params: Vec<String>,
}

fn non_finite(step: u64) -> impl Fn(FinetuneError) -> FinetuneError {
    move |e| match e {
        FinetuneError::Tensor(TensorError::NonFinite { .. })
        | FinetuneError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => {
            FinetuneError::NonFiniteLoss { step }
        }
        e => e,
    }
}

/// Runs one stage on `examples`. The freeze policy is applied first; with
/// `out_dir` set, the final weights go to `stage{n}.ckpt` and the report to
/// `stage{n}_report.json` there.
pub fn run_stage(
    cfg: &StageConfig,
    model: &mut Model,
    examples: &[TrainExample],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    if model.is_merged() {
        model.unmerge_adapters()?;
    }
    model.set_lora_enabled(true);
    let trainable_params = apply_freeze_policy(model, &FreezePolicy::default())?;
    let before = model.params.clone();
    let frozen_checksum_before = model.params.frozen_checksum();

    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let total = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let schedule = cfg.schedule.resolve(steps_per_epoch, total)?;
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });

    // independent streams for data order and instruction choice
    let mut instr_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    instr_rng.set_stream(u64::MAX);

    let mut losses = Vec::with_capacity(total as usize);
    let mut learning_rates = Vec::with_capacity(total as usize);
    let mut epoch_losses = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < total {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);

        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let mut tape = Tape::new();
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &examples[i];
                let prompt = match &ex.prompt {
                    PromptSource::Fixed(p) => p.clone(),
                    PromptSource::CaptionPool(pool) => assemble_random_caption_prompt(pool, &mut instr_rng)?,
                };
                let l = compute_loss(&mut tape, model, &prompt, &ex.features, &ex.target).map_err(non_finite(step))?;
                parts.push(l);
            }
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = tape.add(loss, p).map_err(|e| non_finite(step)(e.into()))?;
            }
            let loss = tape
                .scale(loss, 1.0 / batch.len() as f64)
                .map_err(|e| non_finite(step)(e.into()))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(FinetuneError::NonFiniteLoss { step });
            }
            model.params.zero_grad();
            tape.backward_into(loss, &mut model.params)
                .map_err(|e| non_finite(step)(e.into()))?;
            let lr = schedule.lr_at(step)?;
            opt.step(&mut model.params, lr).map_err(|e| non_finite(step)(e.into()))?;
            log::debug!("stage {} step {step} loss {value:.6} lr {lr:.3e}", cfg.stage);
            losses.push(value);
            learning_rates.push(lr);
            epoch_sum += value;
            epoch_n += 1;
            step += 1;
        }
        if epoch_n > 0 {
            epoch_losses.push(epoch_sum / epoch_n as f64);
            log::info!("stage {} epoch {epoch} mean loss {:.6}", cfg.stage, epoch_sum / epoch_n as f64);
        }
        epoch += 1;
    }

    let mut report = TrainReport {
        stage: cfg.stage,
        steps: step,
        losses,
        epoch_losses,
        learning_rates,
        checkpoint_path: None,
        trainable_count: count_trainable(model),
        frozen_checksum_before,
        frozen_checksum_after: model.params.frozen_checksum(),
        changed_params: model.params.changed_since(&before),
        trainable_params,
    };
    if let Some(dir) = out_dir {
        let ckpt = dir.join(format!("stage{}.ckpt", cfg.stage));
        save_checkpoint(model, &ckpt)?;
        report.checkpoint_path = Some(ckpt);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        let path = dir.join(format!("stage{}_report.json", cfg.stage));
        fs::write(&path, json).map_err(|e| FinetuneError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(report)
}
