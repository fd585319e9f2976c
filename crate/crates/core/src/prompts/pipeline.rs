use serde::Serialize;

use super::bank::{PromptBank, PromptFlags};
use super::tto::{build_summary_prompt, init_soft_prompts, optimize_soft_prompts};
use super::vocab::{retrieve_topk, VocabularyIndex};
use crate::data::{Image, Tokenizer};
use crate::error::Result;
use crate::model::forward::{generate_greedy, visual_vars};
use crate::model::weights::BoundWeights;
use crate::model::ModelWeights;
use crate::tensor::Tape;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TTO_ITERS: usize = 100;
pub const DEFAULT_TTO_STEP: f64 = 0.01;
pub const DEFAULT_MAX_NEW: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub flags: PromptFlags,
    pub use_tto: bool,
    pub k: usize,
    pub tto_iters: usize,
    pub tto_step: f64,
    pub max_new: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            flags: PromptFlags::default(),
            use_tto: true,
            k: DEFAULT_K,
            tto_iters: DEFAULT_TTO_ITERS,
            tto_step: DEFAULT_TTO_STEP,
            max_new: DEFAULT_MAX_NEW,
        }
    }
}

/// What test-time optimisation did for one image.
#[derive(Clone, Debug, Serialize)]
pub struct TtoTrace {
    pub retrieved: Vec<(String, f64)>,
    pub loss_trace: Vec<f64>,
    pub summary_term: String,
    #[serde(skip)]
    pub summary: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InferenceOutput {
    pub answer_ids: Vec<usize>,
    pub answer: String,
    pub tto: Option<TtoTrace>,
}

/// Retrieval, soft-prompt optimisation and summary construction for one
/// image. Model weights are only read.
pub fn test_time_summary(
    weights: &ModelWeights,
    index: &VocabularyIndex,
    tokenizer: &Tokenizer,
    image: &Image,
    opts: &InferenceOptions,
) -> Result<TtoTrace> {
    let cfg = &weights.config;
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let bw = BoundWeights::bind(&mut tape, weights, &mut leaves);
    let v = visual_vars(&mut tape, cfg, &bw, image)?;
    let zv = tape.to_tensor(v.zv);
    let target = tape.value(v.global).to_vec();
    let retrieved = retrieve_topk(&zv, index, opts.k)?;
    let state = init_soft_prompts(&retrieved, weights, tokenizer)?;
    let state = optimize_soft_prompts(state, &target, opts.tto_iters, opts.tto_step)?;
    let summary = build_summary_prompt(&state)?;
    Ok(TtoTrace {
        summary_term: retrieved[0].0.clone(),
        retrieved,
        loss_trace: state.trace,
        summary: summary.into_data(),
    })
}

/// Answers one question about one image.
pub fn answer_question(
    weights: &ModelWeights,
    bank: &PromptBank,
    index: Option<&VocabularyIndex>,
    tokenizer: &Tokenizer,
    image: &Image,
    question: &[usize],
    opts: &InferenceOptions,
) -> Result<InferenceOutput> {
    let tto = match (opts.use_tto, index) {
        (true, Some(ix)) => Some(test_time_summary(weights, ix, tokenizer, image, opts)?),
        (true, None) => {
            return Err(crate::Error::Contract(
                "test-time optimisation requested without a vocabulary".into(),
            ))
        }
        (false, _) => None,
    };
    let answer_ids = generate_greedy(
        weights,
        bank,
        image,
        question,
        tto.as_ref().map(|t| t.summary.as_slice()),
        opts.flags,
        opts.max_new,
    )?;
    Ok(InferenceOutput {
        answer: tokenizer.decode(&answer_ids),
        answer_ids,
        tto,
    })
}
