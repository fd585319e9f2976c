use std::ops::Range;

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tensor::{Tape, Tensor};

/// Per-request soft-prompt state for test-time optimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPromptState {
    /// Retrieved terms with their similarity, best first.
    pub terms: Vec<(String, f64)>,
    /// Row span of each term inside `soft`.
    pub spans: Vec<Range<usize>>,
    /// `P_soft: [N_r×D_L]`.
    pub soft: Tensor,
    pub iterations: usize,
    /// Alignment loss before the first and after every iteration.
    pub trace: Vec<f64>,
    /// Step size in force after the last iteration.
    pub step: f64,
}

/// Embeds each term through the LM token table (no position rows) and
/// concatenates the rows in rank order.
pub fn init_soft_prompts(
    terms: &[(String, f64)],
    weights: &ModelWeights,
    tokenizer: &Tokenizer,
) -> Result<SoftPromptState> {
    if terms.is_empty() {
        return Err(Error::Contract("soft prompts need at least one term".into()));
    }
    let d = weights.config.lm_dim;
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(terms.len());
    for (term, _) in terms {
        let ids = tokenizer.encode(term)?;
        if ids.is_empty() {
            return Err(Error::Tokenizer(format!("term {term:?} has no tokens")));
        }
        let start = data.len() / d;
        for id in ids {
            data.extend_from_slice(weights.lm.tok_emb.row(id));
        }
        spans.push(start..data.len() / d);
    }
    let n = data.len() / d;
    Ok(SoftPromptState {
        terms: terms.to_vec(),
        spans,
        soft: Tensor::new(&[n, d], data)?,
        iterations: 0,
        trace: Vec::new(),
        step: 0.0,
    })
}

/// `L = (1/N)·Σ_i (1 − cos(p_i, target))` and its gradient with respect to
/// the rows of `soft`.
pub fn alignment_loss(soft: &Tensor, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = soft.rows();
    let mut tape = Tape::new();
    let p = tape.leaf(&soft.clone().with_requires_grad(true));
    let t = tape.constant(&[target.len()], target.to_vec())?;
    let cos = tape.cosine_rows(p, t)?;
    let s = tape.sum(cos);
    let loss = tape.scale(s, -1.0 / n as f64);
    let loss = tape.add_const(loss, &[1.0])?;
    tape.backward(loss)?;
    let value = tape.scalar_value(loss);
    let grad = tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; soft.numel()]);
    Ok((value, grad))
}

/// Most halvings tried in one iteration before the step is declared
/// unproductive and the prompts are left as they are.
const MAX_HALVINGS: usize = 60;

/// Plain gradient descent on the alignment loss with backtracking: a step
/// that would raise the loss is halved until it does not, and the smaller
/// step is kept for later iterations. The trace is therefore monotone.
pub fn optimize_soft_prompts(
    mut state: SoftPromptState,
    target: &[f64],
    iterations: usize,
    step: f64,
) -> Result<SoftPromptState> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {step}")));
    }
    let (mut loss, mut grad) = alignment_loss(&state.soft, target)?;
    state.trace = vec![loss];
    let mut step = step;
    for _ in 0..iterations {
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand = state.soft.clone();
            for (p, g) in cand.data_mut().iter_mut().zip(&grad) {
                *p -= step * g;
            }
            match alignment_loss(&cand, target) {
                Ok((l, g)) if l <= loss => {
                    accepted = Some((cand, l, g));
                    break;
                }
                // A row collapsing to zero counts as an increase.
                Ok(_) | Err(Error::Norm(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if let Some((cand, l, g)) = accepted {
            state.soft = cand;
            loss = l;
            grad = g;
        }
        state.trace.push(loss);
        state.iterations += 1;
    }
    state.step = step;
    Ok(state)
}

/// Mean of the optimised rows belonging to the top-ranked term.
pub fn build_summary_prompt(state: &SoftPromptState) -> Result<Tensor> {
    let span = state
        .spans
        .first()
        .ok_or_else(|| Error::Contract("summary of an empty prompt state".into()))?;
    let d = state.soft.cols();
    let mut out = vec![0.0; d];
    for r in span.clone() {
        for (o, v) in out.iter_mut().zip(state.soft.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / span.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[1, d], out)
}

/// `[summary; zt]`.
pub fn augment_question(summary: &Tensor, zt: &Tensor) -> Result<Tensor> {
    let d = summary.numel();
    let zt_cols = if zt.rank() == 2 { zt.cols() } else { 0 };
    if summary.rank() != 2 || summary.rows() != 1 || (zt.numel() > 0 && zt_cols != d) {
        return Err(Error::Shape {
            op: "augment_question",
            lhs: summary.shape().to_vec(),
            rhs: zt.shape().to_vec(),
        });
    }
    let mut data = summary.data().to_vec();
    data.extend_from_slice(zt.data());
    Tensor::new(&[1 + zt.numel() / d, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> ModelWeights {
        ModelWeights::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn spans_partition_and_match_direct_embedding() {
        let w = weights();
        let tok = Tokenizer::new();
        let terms = vec![("shift left".to_string(), 0.9), ("red".to_string(), 0.5)];
        let s = init_soft_prompts(&terms, &w, &tok).unwrap();
        assert_eq!(s.spans, vec![0..2, 2..3]);
        assert_eq!(s.soft.rows(), 3);
        let id = tok.word_id("red").unwrap();
        assert_eq!(s.soft.row(2), w.lm.tok_emb.row(id));
        assert!(init_soft_prompts(&[("zebra".into(), 1.0)], &w, &tok).is_err());
    }

    #[test]
    fn zero_iterations_keep_state() {
        let w = weights();
        let s = init_soft_prompts(&[("red".into(), 1.0)], &w, &Tokenizer::new()).unwrap();
        let target = vec![0.5; 64];
        let out = optimize_soft_prompts(s.clone(), &target, 0, 0.01).unwrap();
        assert_eq!(out.soft, s.soft);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn aligned_row_stays_at_zero_loss() {
        let target: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let s = SoftPromptState {
            terms: vec![("x".into(), 1.0)],
            spans: vec![0..1],
            soft: Tensor::new(&[1, 8], target.clone()).unwrap(),
            iterations: 0,
            trace: vec![],
            step: 0.0,
        };
        let out = optimize_soft_prompts(s, &target, 10, 0.01).unwrap();
        assert!(out.trace.iter().all(|&l| l.abs() < 1e-12));
    }

    #[test]
    fn summary_is_span_mean() {
        let s = SoftPromptState {
            terms: vec![("a".into(), 1.0), ("b".into(), 0.5)],
            spans: vec![0..2, 2..3],
            soft: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![9.0, 9.0]]).unwrap(),
            iterations: 0,
            trace: vec![],
            step: 0.0,
        };
        let p = build_summary_prompt(&s).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn augment_prepends_one_row() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let a = augment_question(&s, &z).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(&a.data()[2..], z.data());
        let empty = augment_question(&s, &Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(empty.shape(), &[1, 2]);
        assert!(augment_question(&s, &Tensor::zeros(&[1, 3])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn trace_is_monotone(seed in 0u64..10_000, rows in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let soft = Tensor::randn(&[rows, 6], 1.0, &mut rng);
            let target = Tensor::randn(&[6], 1.0, &mut rng);
            let s = SoftPromptState {
                terms: vec![("x".into(), 1.0)],
                spans: vec![0..rows],
                soft,
                iterations: 0,
                trace: vec![],
                step: 0.0,
            };
            let out = optimize_soft_prompts(s, target.data(), 20, 0.5).unwrap();
            prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(out.trace.len(), 21);
        }
    }
}
