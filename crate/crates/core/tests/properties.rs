//! Cross-module invariants as randomized properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptvqa::data::Tokenizer;
use promptvqa::model::forward::{bind_all, decoder_forward};
use promptvqa::model::{ModelConfig, ModelWeights};
use promptvqa::prompts::{retrieve_topk, PromptBank, PromptFlags, VocabularyIndex};
use promptvqa::tensor::{Tape, Tensor};
use promptvqa::training::TrainState;

fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let n_layers = rng.random_range(1..=3);
    ModelConfig {
        lm_dim: heads * rng.random_range(1..=4),
        n_heads: heads,
        n_layers,
        adapt_layers: rng.random_range(0..=n_layers),
        n_adapt: rng.random_range(0..=4),
        n_prefix: rng.random_range(0..=4),
        lm_ffn_hidden: 8,
        vision_dim: 8,
        vision_heads: 2,
        vision_blocks: 1,
        vision_ffn_hidden: 8,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.0f64..300.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], scale, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax_rows(v).unwrap();
        for r in tape.value(s).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn backward_is_deterministic_and_linear(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n, m], 1.0, &mut rng);
        let b = Tensor::randn(&[m, n], 1.0, &mut rng);
        let gain = Tensor::randn(&[n], 1.0, &mut rng);
        let bias = Tensor::randn(&[n], 1.0, &mut rng);
        // L1 = sum(softmax(a·b)), L2 = sum(tanh(layer_norm(a·b)))
        let run = |which: u8| {
            let mut tape = Tape::new();
            let (va, vb, vg, vz) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&gain), tape.leaf(&bias));
            let p = tape.matmul(va, vb).unwrap();
            let s = tape.softmax_rows(p).unwrap();
            let l1 = tape.sum(s);
            let ln = tape.layer_norm(p, vg, vz, 1e-5).unwrap();
            let t = tape.tanh(ln);
            let l2 = tape.sum(t);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            [va, vb, vg, vz].map(|v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        };
        let both = run(0);
        prop_assert_eq!(&both, &run(0));
        let (g1, g2) = (run(1), run(2));
        for ((s, x), y) in both.iter().zip(&g1).zip(&g2) {
            for i in 0..s.len() {
                let x = x.get(i).copied().unwrap_or(0.0);
                let y = y.get(i).copied().unwrap_or(0.0);
                prop_assert!((s[i] - (x + y)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn later_positions_never_change_earlier_logits(seed in any::<u64>(), s in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_config(&mut rng);
        let weights = ModelWeights::new(&cfg, &mut rng).unwrap();
        let mut bank = PromptBank::new(&cfg, &mut rng);
        for i in 0..cfg.adapt_layers {
            bank.set_gate(i, rng.random_range(-1.0..1.0));
        }
        let j = rng.random_range(1..s);
        let x = Tensor::randn(&[s, cfg.lm_dim], 1.0, &mut rng);
        let mut y = x.clone();
        for c in 0..cfg.lm_dim {
            y.data_mut()[j * cfg.lm_dim + c] += rng.random_range(-2.0..2.0);
        }
        let g = Tensor::randn(&[1, cfg.lm_dim], 1.0, &mut rng);
        let logits = |input: &Tensor| {
            let mut tape = Tape::new();
            let (w, p, _) = bind_all(&mut tape, &weights, &bank);
            let xv = tape.leaf(input);
            let gv = tape.leaf(&g);
            let out = decoder_forward(&mut tape, &cfg, &w.lm, Some(&p), xv, PromptFlags::default(), Some(gv)).unwrap();
            tape.value(out).to_vec()
        };
        let (a, b) = (logits(&x), logits(&y));
        let v = cfg.vocab_size;
        prop_assert_eq!(&a[..j * v], &b[..j * v]);
    }

    #[test]
    fn tokenizer_round_trips(ids in proptest::collection::vec(2usize..120, 0..12)) {
        let tok = Tokenizer::new();
        let ids: Vec<usize> = ids.into_iter().filter(|&i| i < tok.vocab_size()).collect();
        let text = tok.decode(&ids);
        prop_assert_eq!(tok.encode(&text).unwrap(), ids);
    }

    #[test]
    fn retrieval_is_a_sorted_prefix_of_the_full_ranking(seed in any::<u64>(), m in 1usize..30, d in 1usize..8, k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<String> = (0..m).map(|i| format!("t{i}")).collect();
        let emb = Tensor::randn(&[m, d], 1.0, &mut rng);
        let index = VocabularyIndex::new(terms, emb, vec![String::new(); m]).unwrap();
        let q = Tensor::randn(&[3, d], 1.0, &mut rng);
        let got = retrieve_topk(&q, &index, k.min(m)).unwrap();
        let all = retrieve_topk(&q, &index, m).unwrap();
        prop_assert_eq!(got.len(), k.min(m));
        prop_assert_eq!(&got[..], &all[..k.min(m)]);
        prop_assert!(all.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        let mut names: Vec<&String> = all.iter().map(|r| &r.0).collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), m);
    }

    #[test]
    fn training_state_round_trips_through_bytes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_config(&mut rng);
        let mut st = TrainState::new(&cfg, seed).unwrap();
        for (_, t) in st.bank.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let bytes = st.to_checkpoint().to_bytes().unwrap();
        let back = TrainState::from_checkpoint(&promptvqa::model::checkpoint::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert!(back == st);
        prop_assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);
    }
}
