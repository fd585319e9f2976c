//! The frozen language model, the vision encoder and prompt-aware attention.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod weights;

pub use config::ModelConfig;
pub use forward::{
    attention_with_prompts, count_all_params, count_trainable_params, decoder_forward,
    embed_text, encode_image, forward_sample, generate_greedy, pool_global, project_visual,
    SequenceLayout,
};
pub use weights::ModelWeights;
