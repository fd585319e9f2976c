//! Finite-difference verification of every backward rule and of one full
//! multimodal forward/backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Image;
use crate::error::Result;
use crate::model::forward::{bind_all, forward_sample};
use crate::model::{ModelConfig, ModelWeights};
use crate::parallel::{self, Execution};
use crate::prompts::{PromptBank, PromptFlags};
use crate::tensor::{finite_diff_check_many, OpKind, Tape, Tensor, Var};
use crate::training::lm_loss_masked;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 20;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Contracts an arbitrary output against fixed random weights so every
/// output element reaches the scalar loss with its own coefficient. When
/// `Mul` itself is under test the contraction goes through a matmul, so an
/// injected fault cannot cancel against the projection.
fn project(tape: &mut Tape, out: Var, kind: OpKind, rng_seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    if kind == OpKind::Mul && shape.len() == 2 {
        let cols = shape[1];
        let w = tape.constant(&[cols, 1], r[..cols].to_vec())?;
        let m = tape.matmul(out, w)?;
        return Ok(tape.sum(m));
    }
    let r = tape.constant(&shape, r)?;
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

/// Random inputs for one operation and the function applying it.
type OpCase = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> OpCase {
    use OpKind as K;
    let (inputs, f): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) = match kind {
        K::MatMul => (
            vec![randn(rng, &[3, 4]), randn(rng, &[4, 5])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        K::MatMulNt => (
            vec![randn(rng, &[3, 4]), randn(rng, &[5, 4])],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        ),
        K::Transpose => (vec![randn(rng, &[3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        K::Add => (
            vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        K::AddRow => (
            vec![randn(rng, &[3, 4]), randn(rng, &[4])],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        K::Mul => (
            vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        K::Scale => {
            let c: f64 = rng.random_range(-2.0..2.0);
            (vec![randn(rng, &[3, 4])], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        K::ScaleBy => (
            vec![randn(rng, &[3, 4]), randn(rng, &[1])],
            Box::new(|t, v| t.scale_by(v[0], v[1])),
        ),
        K::AddConst => {
            let c = randn(rng, &[3, 4]).into_data();
            (vec![randn(rng, &[3, 4])], Box::new(move |t, v| t.add_const(v[0], &c)))
        }
        K::Tanh => (vec![randn(rng, &[3, 4])], Box::new(|t, v| Ok(t.tanh(v[0])))),
        K::Gelu => (vec![randn(rng, &[3, 4])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        K::SoftmaxRows => (
            vec![randn(rng, &[3, 5])],
            Box::new(|t, v| t.softmax_rows(v[0])),
        ),
        K::LayerNorm => (
            vec![randn(rng, &[3, 6]), randn(rng, &[6]), randn(rng, &[6])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        K::Embedding => {
            let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
            (
                vec![randn(rng, &[7, 4])],
                Box::new(move |t, v| t.embedding(v[0], &ids)),
            )
        }
        K::ConcatRows => (
            vec![randn(rng, &[2, 4]), randn(rng, &[3, 4])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        K::ConcatCols => (
            vec![randn(rng, &[3, 2]), randn(rng, &[3, 3])],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        K::SliceRows => {
            let start = rng.random_range(0..3);
            (
                vec![randn(rng, &[5, 4])],
                Box::new(move |t, v| t.slice_rows(v[0], start, 2)),
            )
        }
        K::SliceCols => {
            let start = rng.random_range(0..3);
            (
                vec![randn(rng, &[4, 5])],
                Box::new(move |t, v| t.slice_cols(v[0], start, 2)),
            )
        }
        K::MeanRows => (vec![randn(rng, &[4, 3])], Box::new(|t, v| t.mean_rows(v[0]))),
        K::Sum => (vec![randn(rng, &[3, 4])], Box::new(|t, v| Ok(t.sum(v[0])))),
        K::CrossEntropy => {
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            let mut mask = vec![true; 4];
            mask[rng.random_range(0..4)] = false;
            (
                vec![randn(rng, &[4, 6])],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, &mask)),
            )
        }
        K::CosineRows => (
            vec![randn(rng, &[3, 5]), randn(rng, &[5])],
            Box::new(|t, v| t.cosine_rows(v[0], v[1])),
        ),
    };
    (inputs, f)
}

/// Worst relative error of one operation on one random case. `fault`
/// negates the backward rule of that operation kind.
pub fn op_gradcheck(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(kind as u64));
    let (inputs, f) = op_case(kind, &mut rng);
    finite_diff_check_many(
        |tape, vars| {
            if let Some(k) = fault {
                tape.inject_sign_flip(k);
            }
            let out = f(tape, vars)?;
            project(tape, out, kind, seed)
        },
        &inputs,
        GRADCHECK_EPS,
    )
}

/// Reduced configuration for the whole-model check. The vocabulary is cut
/// along with the width: rows of a 124-way tied head receive gradients near
/// 1e-7, below what central differences at ε = 1e-5 resolve on an O(10) loss.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        vision_dim: 8,
        lm_dim: 16,
        n_layers: 2,
        n_heads: 2,
        adapt_layers: 1,
        n_adapt: 3,
        n_prefix: 2,
        max_seq_len: 16,
        patch_grid: 2,
        image_size: 8,
        lm_ffn_hidden: 24,
        vision_heads: 2,
        vision_blocks: 1,
        vision_ffn_hidden: 8,
        vocab_size: 24,
        ..ModelConfig::default()
    }
}

/// Masked answer loss of one random sample, with a summary row, nonzero
/// gates and every tensor differentiable. Returns the worst relative error
/// over all parameters.
pub fn full_model_gradcheck(cfg: &ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::new(cfg, &mut rng)?;
    let mut bank = PromptBank::new(cfg, &mut rng);
    for i in 0..cfg.adapt_layers {
        bank.set_gate(i, rng.random_range(0.3..0.8));
    }
    let side = cfg.image_size;
    let pixels: Vec<f32> = (0..cfg.image_channels * side * side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let image = Image::new(cfg.image_channels, side, side, pixels)?;
    let summary: Vec<f64> = (0..cfg.lm_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let question: Vec<usize> = (0..3).map(|_| rng.random_range(4..cfg.vocab_size)).collect();
    let answer: Vec<usize> = (0..1).map(|_| rng.random_range(4..cfg.vocab_size)).collect();

    let loss_of = |tape: &mut Tape, weights: &ModelWeights, bank: &PromptBank| -> Result<(Var, Vec<Var>)> {
        let (w, p, leaves) = bind_all(tape, weights, bank);
        let s = tape.constant(&[1, cfg.lm_dim], summary.clone())?;
        let f = forward_sample(
            tape,
            cfg,
            &w,
            &p,
            &image,
            Some(s),
            &question,
            &answer,
            PromptFlags::default(),
        )?;
        let targets = f.layout.targets(&question, &answer);
        let mask = f.layout.loss_mask();
        let loss = lm_loss_masked(tape, &[(f.logits, targets, mask)])?;
        Ok((loss, leaves.into_iter().map(|(_, v)| v).collect()))
    };

    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_sign_flip(k);
    }
    let (loss, vars) = loss_of(&mut tape, &weights, &bank)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |weights: &ModelWeights, bank: &PromptBank| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = loss_of(&mut tape, weights, bank)?;
        Ok(tape.scalar_value(loss))
    };

    let n_weight_tensors = weights.tensors().len();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let mut probe = |delta: f64| -> Result<f64> {
                let apply = |t: &mut Tensor, d: f64| t.data_mut()[i] += d;
                if k < n_weight_tensors {
                    apply(weights.tensors_mut()[k].1, delta);
                } else {
                    apply(bank.tensors_mut()[k - n_weight_tensors].1, delta);
                }
                let v = eval(&weights, &bank);
                if k < n_weight_tensors {
                    apply(weights.tensors_mut()[k].1, -delta);
                } else {
                    apply(bank.tensors_mut()[k - n_weight_tensors].1, -delta);
                }
                v
            };
            let plus = probe(GRADCHECK_EPS)?;
            let minus = probe(-GRADCHECK_EPS)?;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let r = (a - numeric).abs() / denom;
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// One row per differentiable operation (worst over `seeds` random cases)
/// followed by the whole-model row.
pub fn gradcheck_suite(seeds: u64, fault: Option<OpKind>, exec: Execution) -> Result<Vec<GradcheckRow>> {
    let kinds: Vec<OpKind> = OpKind::ALL.to_vec();
    let rows = parallel::map(exec, &kinds, |&kind| -> Result<GradcheckRow> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(op_gradcheck(kind, seed, fault)?);
        }
        Ok(GradcheckRow {
            name: kind.name().to_string(),
            cases: seeds as usize,
            max_rel_err: worst,
            passed: worst < GRADCHECK_TOL,
        })
    });
    let mut rows: Vec<GradcheckRow> = rows.into_iter().collect::<Result<_>>()?;
    let full = full_model_gradcheck(&gradcheck_config(), 0, fault)?;
    rows.push(GradcheckRow {
        name: "full_model(D_L=16)".into(),
        cases: 1,
        max_rel_err: full,
        passed: full < GRADCHECK_TOL,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for kind in OpKind::ALL {
            for seed in 0..3 {
                let e = op_gradcheck(kind, seed, None).unwrap();
                assert!(e < GRADCHECK_TOL, "{} seed {seed}: {e}", kind.name());
            }
        }
    }

    #[test]
    fn sign_flip_is_caught_for_every_op() {
        for kind in OpKind::ALL {
            let e = op_gradcheck(kind, 0, Some(kind)).unwrap();
            assert!(e > GRADCHECK_TOL, "{} fault went unnoticed: {e}", kind.name());
        }
    }

    #[test]
    fn full_model_passes_and_catches_a_fault() {
        let cfg = gradcheck_config();
        let e = full_model_gradcheck(&cfg, 0, None).unwrap();
        assert!(e < GRADCHECK_TOL, "{e}");
        let bad = full_model_gradcheck(&cfg, 0, Some(OpKind::LayerNorm)).unwrap();
        assert!(bad > GRADCHECK_TOL, "{bad}");
    }
}
