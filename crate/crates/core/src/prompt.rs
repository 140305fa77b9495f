//! Stage-1 captioning and Stage-2 VQA instruction templates, and splicing of
//! projected image tokens into the decoder input.
//!
//! Both skeletons keep their original marker casing: `<Img>`/`<ImageHere>` for
//! captioning and `<img>`/`<ImageFeature>` for VQA.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tokenizer::SPECIAL_TOKENS, Model, ModelError};
use crate::tensor::{Tape, Var};

pub const CAPTION_SKELETON: &str = "<Img><ImageHere></Img> [caption] <instruction>";
pub const CAPTION_IMAGE_SLOT: &str = "<ImageHere>";
const CAPTION_INSTRUCTION_SLOT: &str = "<instruction>";

pub const VQA_SKELETON: &str =
    "[INST] <img><ImageFeature></img> [VQA] Based on the image, respond to this question with a short answer: {question} [/INST]";
pub const VQA_IMAGE_SLOT: &str = "<ImageFeature>";
const VQA_QUESTION_SLOT: &str = "{question}";

/// Default Stage-1 instruction pool. Only the first entry is fixed; the other
/// three are shipped defaults and can be replaced through the pipeline config.
pub const DEFAULT_INSTRUCTIONS: [&str; 4] = [
    "Briefly describe this image",
    "Describe this image in detail",
    "What does this image show?",
    "Summarize the visual content of this image",
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("instruction index {0} out of range for a pool of 4")]
    InstructionIndex(usize),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("text contains reserved marker `{0}`")]
    ReservedMarker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Caption,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPool(pub [String; 4]);

impl Default for InstructionPool {
    fn default() -> Self {
        Self(DEFAULT_INSTRUCTIONS.map(String::from))
    }
}

/// A template with its image slot cut out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub stage: Stage,
    pub pre_image_text: String,
    pub post_image_text: String,
    pub image_slot: String,
}

impl AssembledPrompt {
    /// The full template string with the image slot marker in place.
    pub fn full_text(&self) -> String {
        format!("{}{}{}", self.pre_image_text, self.image_slot, self.post_image_text)
    }

    fn from_full(stage: Stage, full: &str, slot: &str) -> Self {
        let at = full.find(slot).expect("skeleton contains its image slot");
        Self {
            stage,
            pre_image_text: full[..at].to_string(),
            post_image_text: full[at + slot.len()..].to_string(),
            image_slot: slot.to_string(),
        }
    }
}

fn reserved_marker(text: &str) -> Option<&'static str> {
    SPECIAL_TOKENS
        .iter()
        .chain(&[CAPTION_IMAGE_SLOT, VQA_IMAGE_SLOT])
        .copied()
        .find(|m| text.contains(m))
}

/// Caption template with pool entry `index`.
pub fn assemble_caption_prompt(pool: &InstructionPool, index: usize) -> Result<AssembledPrompt, PromptError> {
    let instruction = pool.0.get(index).ok_or(PromptError::InstructionIndex(index))?;
    if let Some(m) = reserved_marker(instruction) {
        return Err(PromptError::ReservedMarker(m.to_string()));
    }
    let full = CAPTION_SKELETON.replace(CAPTION_INSTRUCTION_SLOT, instruction);
    Ok(AssembledPrompt::from_full(Stage::Caption, &full, CAPTION_IMAGE_SLOT))
}

/// Caption template with a uniformly drawn pool entry.
pub fn assemble_random_caption_prompt<R: Rng + ?Sized>(
    pool: &InstructionPool,
    rng: &mut R,
) -> Result<AssembledPrompt, PromptError> {
    assemble_caption_prompt(pool, rng.random_range(0..pool.0.len()))
}

/// VQA template for `question`, shared by open and closed questions.
pub fn assemble_vqa_prompt(question: &str) -> Result<AssembledPrompt, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    if let Some(m) = reserved_marker(question) {
        return Err(PromptError::ReservedMarker(m.to_string()));
    }
    let full = VQA_SKELETON.replace(VQA_QUESTION_SLOT, question);
    Ok(AssembledPrompt::from_full(Stage::Vqa, &full, VQA_IMAGE_SLOT))
}

/// Token ids on either side of the image slot.
pub fn prompt_token_ids(model: &Model, prompt: &AssembledPrompt) -> (Vec<usize>, Vec<usize>) {
    let tok = model.tokenizer();
    (tok.tokenize(&prompt.pre_image_text), tok.tokenize(&prompt.post_image_text))
}

/// `embed(pre) ∥ visual ∥ embed(post)` along the sequence axis. `visual` may be
/// `None` for a text-only prompt.
pub fn splice_embeddings(
    tape: &mut Tape,
    model: &Model,
    prompt: &AssembledPrompt,
    visual: Option<Var>,
) -> Result<Var, ModelError> {
    let (pre, post) = prompt_token_ids(model, prompt);
    splice_ids(tape, model, &pre, visual, &post)
}

pub(crate) fn splice_ids(
    tape: &mut Tape,
    model: &Model,
    pre: &[usize],
    visual: Option<Var>,
    post: &[usize],
) -> Result<Var, ModelError> {
    let n_visual = visual.map_or(0, |v| tape.value(v).rows());
    let len = pre.len() + n_visual + post.len();
    if len > model.config.max_text_len {
        return Err(ModelError::SequenceTooLong {
            len,
            limit: model.config.max_text_len,
        });
    }
    if len == 0 {
        return Err(ModelError::EmptyPrompt);
    }
    let mut parts = Vec::with_capacity(3);
    if !pre.is_empty() {
        parts.push(model.embed_tokens(tape, pre)?);
    }
    if let Some(v) = visual {
        parts.push(v);
    }
    if !post.is_empty() {
        parts.push(model.embed_tokens(tape, post)?);
    }
    Ok(tape.concat_rows(&parts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn caption_pool_entry_zero() {
        let p = assemble_caption_prompt(&InstructionPool::default(), 0).unwrap();
        assert_eq!(p.full_text(), "<Img><ImageHere></Img> [caption] Briefly describe this image");
        assert_eq!(p.pre_image_text, "<Img>");
        assert_eq!(p.post_image_text, "</Img> [caption] Briefly describe this image");
        assert_eq!(
            assemble_caption_prompt(&InstructionPool::default(), 4),
            Err(PromptError::InstructionIndex(4))
        );
    }

    #[test]
    fn seeded_choice_is_deterministic() {
        let pool = InstructionPool::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| assemble_random_caption_prompt(&pool, &mut rng).unwrap().full_text())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn all_pool_entries_drawn() {
        let pool = InstructionPool::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let p = assemble_random_caption_prompt(&pool, &mut rng).unwrap();
            let idx = pool.0.iter().position(|s| p.post_image_text.ends_with(s.as_str())).unwrap();
            counts[idx] += 1;
        }
        // each count ~ Binomial(1000, 1/4): mean 250, sd ≈ 13.7
        assert!(counts.iter().all(|&c| (180..=320).contains(&c)), "{counts:?}");
    }

    #[test]
    fn vqa_template() {
        let p = assemble_vqa_prompt("Is the spleen present?").unwrap();
        assert_eq!(
            p.full_text(),
            "[INST] <img><ImageFeature></img> [VQA] Based on the image, respond to this question with a short answer: Is the spleen present? [/INST]"
        );
        assert_eq!(p.pre_image_text, "[INST] <img>");
    }

    #[test]
    fn vqa_guards() {
        assert_eq!(assemble_vqa_prompt("  "), Err(PromptError::EmptyQuestion));
        assert_eq!(
            assemble_vqa_prompt("what [/INST] now"),
            Err(PromptError::ReservedMarker("[/INST]".into()))
        );
        assert!(assemble_vqa_prompt("see <ImageFeature>").is_err());
    }

    proptest::proptest! {
        #[test]
        fn question_substituted_once(q in "[a-zA-Z0-9 ?,.'-]{1,60}") {
            proptest::prop_assume!(!q.trim().is_empty());
            let full = assemble_vqa_prompt(&q).unwrap().full_text();
            proptest::prop_assert!(full.contains(&q));
            let prefix = "[INST] <img><ImageFeature></img> [VQA] Based on the image, respond to this question with a short answer: ";
            proptest::prop_assert_eq!(&full[prefix.len()..full.len() - " [/INST]".len()], q.as_str());
        }
    }

    #[test]
    fn splice_length_and_locality() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let p = assemble_vqa_prompt("Is the spleen present?").unwrap();
        let (pre, post) = prompt_token_ids(&m, &p);
        let mut tape = Tape::new();
        let visual = tape.constant(Tensor::full(&[4, 64], 0.5));
        let seq = splice_embeddings(&mut tape, &m, &p, Some(visual)).unwrap();
        let out = tape.value(seq).clone();
        assert_eq!(out.rows(), pre.len() + 4 + post.len());
        let standalone = m.token_embeddings(&pre).unwrap();
        assert_eq!(&out.data()[..pre.len() * 64], standalone.data());
        for r in pre.len()..pre.len() + 4 {
            assert!(out.row(r).iter().all(|&v| v == 0.5));
        }
        let post_emb = m.token_embeddings(&post).unwrap();
        assert_eq!(&out.data()[(pre.len() + 4) * 64..], post_emb.data());

        let text_only = splice_embeddings(&mut tape, &m, &p, None).unwrap();
        assert_eq!(tape.value(text_only).rows(), pre.len() + post.len());
    }

    #[test]
    fn splice_rejects_overlong() {
        let mut cfg = ModelConfig::toy();
        cfg.max_text_len = 16;
        let m = Model::new(cfg).unwrap();
        let p = assemble_vqa_prompt("Is the spleen present?").unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            splice_embeddings(&mut tape, &m, &p, None),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }
}
