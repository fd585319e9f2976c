use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn: AttnWeights,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl Block {
    fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            attn: AttnWeights {
                wq: Tensor::randn(&[dim, dim], s, rng),
                wk: Tensor::randn(&[dim, dim], s, rng),
                wv: Tensor::randn(&[dim, dim], s, rng),
                wo: Tensor::randn(&[dim, dim], s, rng),
            },
            ln1_gain: Tensor::new(&[dim], vec![1.0; dim]).unwrap(),
            ln1_bias: Tensor::zeros(&[dim]),
            ffn_w1: Tensor::randn(&[hidden, dim], s, rng),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::randn(&[dim, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ffn_b2: Tensor::zeros(&[dim]),
            ln2_gain: Tensor::new(&[dim], vec![1.0; dim]).unwrap(),
            ln2_bias: Tensor::zeros(&[dim]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("wq", &self.attn.wq),
            ("wk", &self.attn.wk),
            ("wv", &self.attn.wv),
            ("wo", &self.attn.wo),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("wq", &mut self.attn.wq),
            ("wk", &mut self.attn.wk),
            ("wv", &mut self.attn.wv),
            ("wo", &mut self.attn.wo),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2),
            ("ffn_b2", &mut self.ffn_b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }
}

/// The decoder-only language model. The output head is tied to `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
}

/// Patch-embedding transformer producing `[N_v×D]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub lm: LanguageModel,
    pub vision: VisionEncoder,
    /// Visual projection `W_p`, stored `[D_L×D]`.
    pub proj: Tensor,
}

pub(crate) const TOK_INIT_STD: f64 = 0.3;
pub(crate) const POS_INIT_STD: f64 = 0.1;

impl ModelWeights {
    /// Random initialisation. Every tensor starts trainable; call
    /// [`ModelWeights::freeze_lm`] once the LM has been pretrained.
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let lm = LanguageModel {
            tok_emb: Tensor::randn(&[c.vocab_size, c.lm_dim], TOK_INIT_STD, rng),
            pos_emb: Tensor::randn(&[c.max_seq_len, c.lm_dim], POS_INIT_STD, rng),
            blocks: (0..c.n_layers)
                .map(|_| Block::new(c.lm_dim, c.lm_ffn_hidden, rng))
                .collect(),
        };
        let vision = VisionEncoder {
            patch_w: Tensor::randn(
                &[c.vision_dim, c.patch_dim()],
                1.0 / (c.patch_dim() as f64).sqrt(),
                rng,
            ),
            patch_b: Tensor::zeros(&[c.vision_dim]),
            pos: Tensor::randn(&[c.n_visual(), c.vision_dim], POS_INIT_STD, rng),
            blocks: (0..c.vision_blocks)
                .map(|_| Block::new(c.vision_dim, c.vision_ffn_hidden, rng))
                .collect(),
        };
        let proj = Tensor::randn(&[c.lm_dim, c.vision_dim], 1.0 / (c.vision_dim as f64).sqrt(), rng);
        let mut w = Self {
            config: config.clone(),
            lm,
            vision,
            proj,
        };
        w.tensors_mut()
            .into_iter()
            .for_each(|(_, t)| t.set_requires_grad(true));
        Ok(w)
    }

    /// Named tensors in canonical order: LM, vision encoder, projection.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), &self.lm.tok_emb),
            ("lm.pos_emb".to_string(), &self.lm.pos_emb),
        ];
        for (i, b) in self.lm.blocks.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("lm.layers.{i}.{n}"), t));
            }
        }
        out.push(("vision.patch_w".into(), &self.vision.patch_w));
        out.push(("vision.patch_b".into(), &self.vision.patch_b));
        out.push(("vision.pos".into(), &self.vision.pos));
        for (i, b) in self.vision.blocks.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("vision.blocks.{i}.{n}"), t));
            }
        }
        out.push(("proj.w".into(), &self.proj));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), &mut self.lm.tok_emb),
            ("lm.pos_emb".to_string(), &mut self.lm.pos_emb),
        ];
        for (i, b) in self.lm.blocks.iter_mut().enumerate() {
            for (n, t) in b.fields_mut() {
                out.push((format!("lm.layers.{i}.{n}"), t));
            }
        }
        out.push(("vision.patch_w".into(), &mut self.vision.patch_w));
        out.push(("vision.patch_b".into(), &mut self.vision.patch_b));
        out.push(("vision.pos".into(), &mut self.vision.pos));
        for (i, b) in self.vision.blocks.iter_mut().enumerate() {
            for (n, t) in b.fields_mut() {
                out.push((format!("vision.blocks.{i}.{n}"), t));
            }
        }
        out.push(("proj.w".into(), &mut self.proj));
        out
    }

    /// Marks every LM tensor as frozen.
    pub fn freeze_lm(&mut self) {
        for (name, t) in self.tensors_mut() {
            if name.starts_with("lm.") {
                t.set_requires_grad(false);
            }
        }
    }

    pub fn set_vision_trainable(&mut self, flag: bool) {
        for (name, t) in self.tensors_mut() {
            if !name.starts_with("lm.") {
                t.set_requires_grad(flag);
            }
        }
    }

    pub fn lm_frozen(&self) -> bool {
        self.tensors()
            .iter()
            .filter(|(n, _)| n.starts_with("lm."))
            .all(|(_, t)| !t.requires_grad())
    }

    /// SHA-256 over the names and raw bits of every LM tensor.
    pub fn lm_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            if !name.starts_with("lm.") {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Checks every tensor's shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let reference = Self::new(c, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let got = self.tensors();
        let want = reference.tensors();
        if got.len() != want.len() {
            return Err(Error::Config(format!(
                "expected {} weight tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, t), (_, r)) in got.iter().zip(&want) {
            if t.shape() != r.shape() {
                return Err(Error::Dimension {
                    name: name.clone(),
                    expected: r.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Tape handles for one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1: (Var, Var),
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2: (Var, Var),
}

impl BoundBlock {
    fn from_vars(v: &[Var]) -> Self {
        Self {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            ln1: (v[4], v[5]),
            ffn_w1: v[6],
            ffn_b1: v[7],
            ffn_w2: v[8],
            ffn_b2: v[9],
            ln2: (v[10], v[11]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLm {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
}

#[derive(Clone, Debug)]
pub struct BoundVision {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
}

#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub lm: BoundLm,
    pub vision: BoundVision,
    pub proj: Var,
}

impl BoundWeights {
    /// Records every weight as a leaf. Each `(name, var)` pair is appended
    /// to `leaves` in canonical order.
    pub fn bind(tape: &mut Tape, w: &ModelWeights, leaves: &mut Vec<(String, Var)>) -> Self {
        let start = leaves.len();
        for (name, t) in w.tensors() {
            let v = tape.leaf(t);
            leaves.push((name, v));
        }
        let vars: Vec<Var> = leaves[start..].iter().map(|(_, v)| *v).collect();
        let nl = w.lm.blocks.len();
        let nv = w.vision.blocks.len();
        let lm_blocks = (0..nl)
            .map(|i| BoundBlock::from_vars(&vars[2 + 12 * i..]))
            .collect();
        let vstart = 2 + 12 * nl;
        let vision_blocks = (0..nv)
            .map(|i| BoundBlock::from_vars(&vars[vstart + 3 + 12 * i..]))
            .collect();
        Self {
            lm: BoundLm {
                tok_emb: vars[0],
                pos_emb: vars[1],
                blocks: lm_blocks,
            },
            vision: BoundVision {
                patch_w: vars[vstart],
                patch_b: vars[vstart + 1],
                pos: vars[vstart + 2],
                blocks: vision_blocks,
            },
            proj: vars[vstart + 3 + 12 * nv],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_follows_canonical_order() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let b = BoundWeights::bind(&mut tape, &w, &mut leaves);
        assert_eq!(leaves.len(), w.tensors().len());
        assert_eq!(tape.value(b.proj), w.proj.data());
        assert_eq!(tape.value(b.lm.blocks[3].ln2.1), w.lm.blocks[3].ln2_bias.data());
        assert_eq!(tape.value(b.vision.pos), w.vision.pos.data());
        assert_eq!(
            tape.value(b.vision.blocks[1].ffn_w2),
            w.vision.blocks[1].ffn_w2.data()
        );
    }

    #[test]
    fn freezing_changes_flags_not_values() {
        let cfg = ModelConfig::default();
        let mut w = ModelWeights::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = w.lm_checksum();
        assert!(!w.lm_frozen());
        w.freeze_lm();
        assert!(w.lm_frozen());
        assert_eq!(before, w.lm_checksum());
        assert!(w.proj.requires_grad());
        w.validate().unwrap();
    }
}
