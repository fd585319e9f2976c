//! Trainable prompt state and the test-time prompt pipeline.

pub mod bank;
pub mod pipeline;
pub mod tto;
pub mod vocab;

pub use bank::{PromptBank, PromptFlags};
pub use pipeline::{answer_question, test_time_summary, InferenceOptions, InferenceOutput, TtoTrace};
pub use tto::{
    augment_question, build_summary_prompt, init_soft_prompts, optimize_soft_prompts,
    SoftPromptState,
};
pub use vocab::{build_vocabulary, retrieve_topk, VocabularyIndex};
