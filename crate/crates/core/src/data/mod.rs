//! Synthetic VQA corpus, tokenizer, dataset files, metrics and evaluation.

pub mod eval;
pub mod generate;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod tokenizer;

pub use generate::{
    generate_dataset, AnswerClass, CaptionSample, Corpus, Exemplar, QType, Split, SyntheticSpec,
    VqaSample,
};
pub use metrics::{score_closed_exact, score_open_recall};
pub use scene::{render_image, Image};
pub use tokenizer::Tokenizer;
