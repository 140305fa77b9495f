//! Frozen patch encoder, group-of-four token concatenation, linear projector and
//! a LoRA-adapted causal decoder.

mod attention;
mod generate;
pub mod lora;
mod lm;
pub mod tokenizer;
mod vision;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Tensor, TensorError};

pub use lora::LoraAdapter;
pub use tokenizer::Tokenizer;
pub use vision::{group_visual_tokens, ungroup_visual_tokens};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {got_h}x{got_w}x{got_c}, expected {expected}x{expected}x{channels}")]
    ImageSize {
        expected: usize,
        channels: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("sequence of {len} tokens exceeds max_text_len {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("{tokens} visual tokens cannot be grouped by {group}")]
    Grouping { tokens: usize, group: usize },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("LoRA rank must be positive")]
    ZeroRank,
    #[error("adapters are already merged")]
    AlreadyMerged,
    #[error("adapters are not merged")]
    NotMerged,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attention projections that can carry a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnProj {
    Q,
    K,
    V,
    O,
}

impl AttnProj {
    pub const ALL: [AttnProj; 4] = [AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O];

    pub fn as_str(self) -> &'static str {
        match self {
            AttnProj::Q => "q",
            AttnProj::K => "k",
            AttnProj::V => "v",
            AttnProj::O => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// Missing keys in a config file fall back to [`ModelConfig::toy`].
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_vis: usize,
    pub group_size: usize,
    pub d_lm: usize,
    pub n_layers_vis: usize,
    pub n_layers_lm: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<AttnProj>,
    /// Seed for the synthetic base weights.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the CLI defaults.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            d_vis: 32,
            group_size: 4,
            d_lm: 64,
            n_layers_vis: 2,
            n_layers_lm: 2,
            n_heads: 4,
            mlp_ratio: 4,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_text_len: 256,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: vec![AttnProj::Q, AttnProj::V],
            init_seed: 0,
        }
    }

    /// Full-size shape: 448px input, 4096-wide 32-layer decoder, rank-64 LoRA
    /// on the query and value projections, 1024-token context. The encoder
    /// width (1408), depth and patch size (14) are assumptions. Only suitable
    /// for arithmetic such as parameter counting; never instantiated in tests.
    pub fn full_scale() -> Self {
        Self {
            image_size: 448,
            patch_size: 14,
            channels: 3,
            d_vis: 1408,
            group_size: 4,
            d_lm: 4096,
            n_layers_vis: 39,
            n_layers_lm: 32,
            n_heads: 32,
            mlp_ratio: 4,
            vocab_size: 32000,
            max_text_len: 1024,
            lora_rank: 64,
            lora_alpha: 128.0,
            lora_targets: vec![AttnProj::Q, AttnProj::V],
            init_seed: 0,
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.n_patches() / self.group_size
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_vis", self.d_vis),
            ("d_lm", self.d_lm),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.group_size != 4 {
            return bad(format!("group_size is fixed at 4, got {}", self.group_size));
        }
        if !self.n_patches().is_multiple_of(self.group_size) {
            return bad(format!(
                "{} patches not divisible by group_size {}",
                self.n_patches(),
                self.group_size
            ));
        }
        if !self.d_lm.is_multiple_of(self.n_heads) || !self.d_vis.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_lm {} and d_vis {} must be divisible by n_heads {}",
                self.d_lm, self.d_vis, self.n_heads
            ));
        }
        if self.lora_rank == 0 {
            return Err(ModelError::ZeroRank);
        }
        if self.lora_rank >= self.d_lm {
            return bad(format!(
                "lora_rank {} must be below the adapted width {}",
                self.lora_rank, self.d_lm
            ));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        if self.vocab_size < tokenizer::VOCAB_SIZE {
            return bad(format!(
                "vocab_size {} smaller than tokenizer vocabulary {}",
                self.vocab_size,
                tokenizer::VOCAB_SIZE
            ));
        }
        Ok(())
    }
}

pub(crate) fn lora_names(layer: usize, proj: AttnProj) -> (String, String) {
    let base = format!("lm.blocks.{layer}.attn.{}", proj.as_str());
    (format!("{base}.lora_A"), format!("{base}.lora_B"))
}

pub(crate) fn proj_weight_name(prefix: &str, proj: AttnProj) -> String {
    format!("{prefix}.attn.{}.weight", proj.as_str())
}

/// Model weights plus adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    lora_enabled: bool,
    merged_base: Option<HashMap<String, Tensor>>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, out_dim: usize, in_dim: usize) -> Result<()> {
        let t = Tensor::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), &mut self.rng);
        self.store.insert(name, t, true)?;
        Ok(())
    }

    fn randn(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Result<()> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t, decay)?;
        Ok(())
    }

    fn constant(&mut self, name: &str, n: usize, value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(&[n], value), false)?;
        Ok(())
    }

    fn layer_norm(&mut self, prefix: &str, n: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gain"), n, 1.0)?;
        self.constant(&format!("{prefix}.bias"), n, 0.0)
    }

    fn block(&mut self, prefix: &str, d: usize, mlp_ratio: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        for proj in AttnProj::ALL {
            self.weight(&proj_weight_name(prefix, proj), d, d)?;
        }
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        let hidden = d * mlp_ratio;
        self.weight(&format!("{prefix}.mlp.fc1.weight"), hidden, d)?;
        self.randn(&format!("{prefix}.mlp.fc1.bias"), &[hidden], 0.02, false)?;
        self.weight(&format!("{prefix}.mlp.fc2.weight"), d, hidden)?;
        self.randn(&format!("{prefix}.mlp.fc2.bias"), &[d], 0.02, false)
    }
}

impl Model {
    /// Builds a model with seeded synthetic base weights, a freshly initialized
    /// projector and zero-initialized LoRA `B` factors. All parameters start
    /// frozen; the fine-tuning freeze policy decides what trains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let c = &config;
        let patch_dim = c.patch_size * c.patch_size * c.channels;

        init.weight("vision.patch_embed.weight", c.d_vis, patch_dim)?;
        init.randn("vision.patch_embed.bias", &[c.d_vis], 0.02, false)?;
        init.randn("vision.pos_embed", &[c.n_patches(), c.d_vis], 0.5, false)?;
        for i in 0..c.n_layers_vis {
            init.block(&format!("vision.blocks.{i}"), c.d_vis, c.mlp_ratio)?;
        }
        init.layer_norm("vision.ln_final", c.d_vis)?;

        init.weight("projector.weight", c.d_lm, c.group_size * c.d_vis)?;
        init.constant("projector.bias", c.d_lm, 0.0)?;

        init.randn("lm.tok_embed", &[c.vocab_size, c.d_lm], 1.0, false)?;
        init.randn("lm.pos_embed", &[c.max_text_len, c.d_lm], 0.5, false)?;
        for i in 0..c.n_layers_lm {
            init.block(&format!("lm.blocks.{i}"), c.d_lm, c.mlp_ratio)?;
        }
        init.layer_norm("lm.ln_final", c.d_lm)?;
        init.randn("lm.head.weight", &[c.vocab_size, c.d_lm], 2.0 / (c.d_lm as f64).sqrt(), true)?;

        let bound = 1.0 / (c.d_lm as f64).sqrt();
        for i in 0..c.n_layers_lm {
            for &proj in &c.lora_targets {
                let (a, b) = lora_names(i, proj);
                let ta = Tensor::uniform(&[c.lora_rank, c.d_lm], bound, &mut init.rng);
                init.store.insert(a, ta, true)?;
                init.store.insert(b, Tensor::zeros(&[c.d_lm, c.lora_rank]), true)?;
            }
        }

        Ok(Self {
            config,
            params: store,
            lora_enabled: true,
            merged_base: None,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        Self {
            config,
            params,
            lora_enabled: true,
            merged_base: None,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer
    }

    /// When disabled, the decoder runs on its base weights only.
    pub fn set_lora_enabled(&mut self, enabled: bool) {
        self.lora_enabled = enabled;
    }

    pub fn lora_enabled(&self) -> bool {
        self.lora_enabled && self.merged_base.is_none()
    }

    pub fn is_merged(&self) -> bool {
        self.merged_base.is_some()
    }

    /// Adapter tensors for one attention projection.
    pub fn adapter(&self, layer: usize, proj: AttnProj) -> Result<LoraAdapter> {
        let (a, b) = lora_names(layer, proj);
        LoraAdapter::new(
            self.params.get(&a)?.tensor.clone(),
            self.params.get(&b)?.tensor.clone(),
            self.config.lora_alpha,
        )
    }

    /// Folds every adapter into its base projection. The unmerged base weights
    /// are retained so [`Model::unmerge_adapters`] restores them bit-exactly.
    pub fn merge_adapters(&mut self) -> Result<()> {
        if self.merged_base.is_some() {
            return Err(ModelError::AlreadyMerged);
        }
        let mut saved = HashMap::new();
        for i in 0..self.config.n_layers_lm {
            for &proj in &self.config.lora_targets.clone() {
                let adapter = self.adapter(i, proj)?;
                let name = proj_weight_name(&format!("lm.blocks.{i}"), proj);
                let base = self.params.get(&name)?.tensor.clone();
                let merged = adapter.merge(&base)?;
                self.params.get_mut(&name)?.tensor = merged;
                saved.insert(name, base);
            }
        }
        self.merged_base = Some(saved);
        Ok(())
    }

    pub fn unmerge_adapters(&mut self) -> Result<()> {
        let saved = self.merged_base.take().ok_or(ModelError::NotMerged)?;
        for (name, base) in saved {
            let p = self.params.get_mut(&name)?;
            let trainable = p.trainable;
            p.tensor = base;
            p.tensor.requires_grad = trainable;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        assert_eq!(ModelConfig::full_scale().n_visual_tokens(), 256);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut c = ModelConfig::toy();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.image_size = 8;
        c.patch_size = 4; // 4 patches → 1 group, still fine
        c.validate().unwrap();
        c.image_size = 12; // 9 patches
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.lora_rank = 0;
        assert!(matches!(c.validate(), Err(ModelError::ZeroRank)));
        let mut c = ModelConfig::toy();
        c.lora_rank = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_names_unique_and_adapters_zero() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        assert!(m.params.contains("lm.blocks.1.attn.v.lora_B"));
        assert!(!m.params.contains("lm.blocks.0.attn.k.lora_A"));
        for p in m.params.iter().filter(|p| p.name.ends_with("lora_B")) {
            assert!(p.tensor.data().iter().all(|&v| v == 0.0));
        }
        assert!(m.params.iter().all(|p| !p.trainable));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Model::new(ModelConfig::toy()).unwrap();
        let b = Model::new(ModelConfig::toy()).unwrap();
        assert_eq!(a, b);
    }
}
