//! Text warmup, caption alignment and VQA fine-tuning.

pub mod adam;
pub mod trainer;

pub use adam::{adam_step, Adam};
pub use trainer::{
    draw_batch, lm_loss_masked, read_loss_csv, train_stage1, train_stage2, train_step,
    warmup_texts, write_loss_csv, Example, Phase, TrainConfig, TrainState,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::model::checkpoint::Checkpoint;
    use crate::model::ModelConfig;
    use crate::parallel::Execution;
    use crate::tensor::{Tape, Tensor};
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            lm_dim: 16,
            vision_dim: 8,
            n_heads: 2,
            n_layers: 2,
            adapt_layers: 1,
            n_adapt: 3,
            n_prefix: 2,
            lm_ffn_hidden: 24,
            vision_ffn_hidden: 8,
            vision_blocks: 1,
            image_size: 8,
            patch_grid: 2,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn examples(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..3 * 64).map(|_| rng.random::<f32>()).collect();
                Example {
                    image: Some(Arc::new(Image::new(3, 8, 8, data).unwrap())),
                    question: vec![rng.random_range(2..40), rng.random_range(2..40)],
                    answer: vec![rng.random_range(2..40)],
                }
            })
            .collect()
    }

    fn tc(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            stage: 2,
            steps,
            batch_size: 3,
            lr,
            warmup_steps: 0,
            ..TrainConfig::default()
        }
    }

    fn stage2_state(seed: u64) -> TrainState {
        let mut s = TrainState::new(&tiny_cfg(), seed).unwrap();
        let t = tc(1, 1e-3);
        s.begin_phase(Phase::Stage1, t.lr, &t);
        s
    }

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[5, 16]));
        let mask = vec![false, false, true, true, true];
        let l = lm_loss_masked(&mut tape, &[(logits, vec![1; 5], mask)]).unwrap();
        assert!((tape.scalar_value(l) - 3.0 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut data = vec![0.0; 3 * 4];
        for (i, t) in [1usize, 3, 0].iter().enumerate() {
            data[i * 4 + t] = 1e4;
        }
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::new(&[3, 4], data).unwrap());
        let l = lm_loss_masked(&mut tape, &[(logits, vec![1, 3, 0], vec![true; 3])]).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn batch_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let mut batch = Vec::new();
        let mut want = 0.0;
        for _ in 0..4 {
            let n = rng.random_range(2..6);
            let t = Tensor::randn(&[n, 7], 2.0, &mut rng);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            mask[n - 1] = true;
            for i in 0..n {
                if mask[i] {
                    let row = t.row(i);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    want -= (row[targets[i]].exp() / z).ln();
                }
            }
            let v = tape.leaf(&t);
            batch.push((v, targets, mask));
        }
        let l = lm_loss_masked(&mut tape, &batch).unwrap();
        assert!((tape.scalar_value(l) - want / 4.0).abs() < 1e-10);
        let empty = [(batch[0].0, batch[0].1.clone(), vec![false; batch[0].1.len()])];
        assert!(matches!(lm_loss_masked(&mut tape, &empty), Err(Error::DegenerateLoss)));
    }

    #[test]
    fn parallel_and_sequential_steps_agree_bitwise() {
        let data = examples(6, 4);
        let mut a = stage2_state(3);
        let mut b = a.clone();
        for _ in 0..3 {
            let la = train_step(&mut a, &data, 4, Execution::Parallel).unwrap();
            let lb = train_step(&mut b, &data, 4, Execution::Sequential).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert!(a == b);
    }

    #[test]
    fn zero_learning_rate_keeps_a_constant_curve() {
        let mut s = stage2_state(1);
        let data = examples(1, 2);
        let curve = train_stage2(&mut s, &tc(5, 0.0), &data, Execution::Sequential, |_, _| Ok(())).unwrap();
        assert!(curve.iter().all(|(_, l)| *l == curve[0].1));
    }

    #[test]
    fn frozen_lm_is_untouched_and_counts_agree() {
        let mut s = stage2_state(3);
        let before = s.weights.lm_checksum();
        let data = examples(6, 4);
        train_stage2(&mut s, &tc(4, 1e-2), &data, Execution::Parallel, |_, _| Ok(())).unwrap();
        assert_eq!(before, s.weights.lm_checksum());
        let n: usize = s.trainable().iter().map(|(_, _, k)| k).sum();
        assert_eq!(n, crate::model::count_trainable_params(&s.weights, &s.bank));
        assert_eq!(n, s.weights.config.trainable_params_formula());
    }

    #[test]
    fn execution_mode_does_not_change_results() {
        let data = examples(6, 4);
        let mut a = stage2_state(3);
        let mut b = stage2_state(3);
        let ca = train_stage2(&mut a, &tc(3, 1e-2), &data, Execution::Parallel, |_, _| Ok(())).unwrap();
        let cb = train_stage2(&mut b, &tc(3, 1e-2), &data, Execution::Sequential, |_, _| Ok(())).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_replays_curve_bit_exactly() {
        let data = examples(5, 6);
        let t = tc(6, 1e-2);
        let mut full = stage2_state(7);
        let mut saved = None;
        let curve = train_stage2(&mut full, &t, &data, Execution::Sequential, |st, _| {
            if st.step == 3 {
                saved = Some(st.to_checkpoint().to_bytes()?);
            }
            Ok(())
        })
        .unwrap();
        let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
        let mut resumed = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(resumed.step, 3);
        let tail = train_stage2(&mut resumed, &t, &data, Execution::Sequential, |_, _| Ok(())).unwrap();
        assert_eq!(tail.len(), 3);
        for ((sa, la), (sb, lb)) in curve[3..].iter().zip(&tail) {
            assert_eq!(sa, sb);
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(full.to_checkpoint().to_bytes().unwrap(), resumed.to_checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let ck = stage2_state(1).to_checkpoint();
        let mut other = TrainState::new(&ModelConfig { n_prefix: 3, ..tiny_cfg() }, 0).unwrap();
        match other.restore_from(&ck) {
            Err(Error::Dimension { name, .. }) => assert!(name.starts_with("prompts.prefix_key"), "{name}"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn question_logits_do_not_affect_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let mask = vec![false, false, false, true, true, true];
        let targets = vec![0, 1, 2, 3, 4, 0];
        let mut tape = Tape::new();
        let a = tape.leaf(&t);
        let la = lm_loss_masked(&mut tape, &[(a, targets.clone(), mask.clone())]).unwrap();
        let mut perturbed = t.clone();
        perturbed.data_mut()[5..10].iter_mut().for_each(|v| *v += 3.0);
        let b = tape.leaf(&perturbed);
        let lb = lm_loss_masked(&mut tape, &[(b, targets, mask)]).unwrap();
        assert_eq!(tape.scalar_value(la), tape.scalar_value(lb));
    }

    #[test]
    fn every_trainable_tensor_receives_gradient() {
        let mut s = stage2_state(11);
        let data = examples(8, 12);
        let names: Vec<String> = s.trainable().into_iter().map(|(_, n, _)| n).collect();
        let mut seen = vec![false; names.len()];
        for _ in 0..5 {
            let idx: Vec<usize> = s.trainable().iter().map(|(i, _, _)| *i).collect();
            for ex in &data {
                let (_, g) = trainer::example_gradients(&s.weights, &s.bank, ex, 0, &idx).unwrap();
                for (k, gi) in g.iter().enumerate() {
                    seen[k] |= gi.iter().any(|v| *v != 0.0);
                }
            }
            train_step(&mut s, &data, 3, Execution::Sequential).unwrap();
        }
        let dead: Vec<_> = names.iter().zip(&seen).filter(|(_, s)| !**s).collect();
        assert!(dead.is_empty(), "{dead:?}");
    }

    #[test]
    fn warmup_trains_only_the_lm_then_freezes_it() {
        let cfg = tiny_cfg();
        let mut s = TrainState::new(&cfg, 2).unwrap();
        let vision_before = s.weights.vision.patch_w.clone();
        let texts = vec![Example::text(vec![3, 4, 5]), Example::text(vec![6, 7])];
        let caps = examples(2, 3);
        let t = TrainConfig {
            warmup_steps: 3,
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let lm0 = s.weights.lm_checksum();
        let (warm, stage1) = train_stage1(&mut s, &t, &texts, &caps, Execution::Sequential, |_, _| Ok(())).unwrap();
        assert_eq!((warm.len(), stage1.len()), (3, 2));
        assert_ne!(lm0, s.weights.lm_checksum());
        assert!(s.weights.lm_frozen());
        assert_eq!(s.phase, Phase::Stage1);
        assert_ne!(vision_before, s.weights.vision.patch_w);
    }

    #[test]
    fn loss_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let curve = vec![(0, 1.0 / 3.0), (1, 0.1 + 0.2)];
        write_loss_csv(&p, &curve).unwrap();
        let back = read_loss_csv(&p).unwrap();
        assert_eq!(back, curve);
    }
}
