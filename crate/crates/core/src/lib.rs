//! Parameter-efficient multimodal fine-tuning for medical visual question
//! answering, plus the scoring and human-review logic for generative answers.

pub mod data;
pub mod eval;
pub mod finetune;
pub mod humaneval;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod tensor;

pub use data::{AnswerType, Split};
pub use model::{Model, ModelConfig};
pub use tensor::{ParamStore, Tape, Tensor};
