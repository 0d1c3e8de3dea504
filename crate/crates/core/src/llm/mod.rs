//! Language model core: vocabulary, tiny masked decoder, low-rank
//! adapters, stage freeze policy, and text decoding.

pub mod freeze;
pub mod generate;
pub mod lora;
pub mod model;
pub mod vocab;

pub use freeze::{apply_stage, trainable_parameters, FreezeManifest, Stage};
pub use generate::{generate_text, Decode, ScenePrompt};
pub use lora::{attach_lora, lora_targets, LORA_RANK};
pub use model::{embed_text, init_llm, llm_forward, LlmConfig, LlmOutput};
pub use vocab::Vocabulary;
