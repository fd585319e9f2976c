//! Parameter-efficient multimodal prompting on a small frozen decoder-only
//! language model.
//!
//! * [`tensor`]: f64 tensors, a reverse-mode tape and a finite-difference
//!   gradient oracle.
//! * [`model`]: the frozen LM, a toy vision encoder, the visual projection
//!   and prompt-aware attention (prefix key/value rows plus gated adaption
//!   prompts).
//! * [`prompts`]: trainable prompt state and the test-time pipeline
//!   (vocabulary retrieval, soft-prompt optimisation, summary token).
//! * [`training`]: two-stage training with a masked LM loss and Adam.
//! * [`data`]: synthetic VQA corpus, tokenizer, metrics and evaluation.
//! * [`verify`]: the gradient-check suite behind `promptvqa gradcheck`.
//! * [`cli`]: the `promptvqa` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod parallel;
pub mod prompts;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use tensor::{Tape, Tensor, Var};
