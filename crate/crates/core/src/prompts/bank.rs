use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Tape, Tensor, Var};

/// All trainable prompt state: gated adaption prompts for the top layers
/// and prefix key/value rows for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `[N_a×D_L]` per adaption layer, bottom to top.
    pub adaption: Vec<Tensor>,
    /// One scalar gate per adaption layer, zero at initialisation.
    pub gates: Vec<Tensor>,
    /// `[N_p×D_L]` per layer.
    pub prefix_keys: Vec<Tensor>,
    pub prefix_values: Vec<Tensor>,
}

pub(crate) const ADAPT_INIT_STD: f64 = 0.1;
pub(crate) const PREFIX_INIT_STD: f64 = 0.1;

impl PromptBank {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.lm_dim;
        let t = |t: Tensor| t.with_requires_grad(true);
        Self {
            adaption: (0..cfg.adapt_layers)
                .map(|_| t(Tensor::randn(&[cfg.n_adapt, d], ADAPT_INIT_STD, rng)))
                .collect(),
            gates: (0..cfg.adapt_layers)
                .map(|_| t(Tensor::zeros(&[1])))
                .collect(),
            prefix_keys: (0..cfg.n_layers)
                .map(|_| t(Tensor::randn(&[cfg.n_prefix, d], PREFIX_INIT_STD, rng)))
                .collect(),
            prefix_values: (0..cfg.n_layers)
                .map(|_| t(Tensor::randn(&[cfg.n_prefix, d], PREFIX_INIT_STD, rng)))
                .collect(),
        }
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.adaption.iter().enumerate() {
            out.push((format!("prompts.adaption.{i}"), t));
        }
        for (i, t) in self.gates.iter().enumerate() {
            out.push((format!("prompts.gate.{i}"), t));
        }
        for (i, t) in self.prefix_keys.iter().enumerate() {
            out.push((format!("prompts.prefix_key.{i}"), t));
        }
        for (i, t) in self.prefix_values.iter().enumerate() {
            out.push((format!("prompts.prefix_value.{i}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.adaption.iter_mut().enumerate() {
            out.push((format!("prompts.adaption.{i}"), t));
        }
        for (i, t) in self.gates.iter_mut().enumerate() {
            out.push((format!("prompts.gate.{i}"), t));
        }
        for (i, t) in self.prefix_keys.iter_mut().enumerate() {
            out.push((format!("prompts.prefix_key.{i}"), t));
        }
        for (i, t) in self.prefix_values.iter_mut().enumerate() {
            out.push((format!("prompts.prefix_value.{i}"), t));
        }
        out
    }

    pub fn gate(&self, adapt_index: usize) -> f64 {
        self.gates[adapt_index].item()
    }

    pub fn set_gate(&mut self, adapt_index: usize, value: f64) {
        self.gates[adapt_index].data_mut()[0] = value;
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                return Err(Error::Dimension {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            t.check_finite(name)
        };
        if self.adaption.len() != cfg.adapt_layers || self.gates.len() != cfg.adapt_layers {
            return Err(Error::Config("adaption layer count mismatch".into()));
        }
        if self.prefix_keys.len() != cfg.n_layers || self.prefix_values.len() != cfg.n_layers {
            return Err(Error::Config("prefix layer count mismatch".into()));
        }
        for (name, t) in self.tensors() {
            let shape = if name.starts_with("prompts.gate") {
                vec![1]
            } else if name.starts_with("prompts.adaption") {
                vec![cfg.n_adapt, cfg.lm_dim]
            } else {
                vec![cfg.n_prefix, cfg.lm_dim]
            };
            expect(&name, t, &shape)?;
        }
        Ok(())
    }
}

/// Tape handles for one layer's prompts.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerPrompts {
    /// `(P^K, P^V)` rows for this layer.
    pub prefix: Option<(Var, Var)>,
    /// `(P^a, α)` for adaption layers.
    pub adaption: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct BoundPrompts {
    pub adaption: Vec<Var>,
    pub gates: Vec<Var>,
    pub prefix_keys: Vec<Var>,
    pub prefix_values: Vec<Var>,
}

/// Which prompt families take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptFlags {
    pub adaption: bool,
    pub prefix: bool,
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self {
            adaption: true,
            prefix: true,
        }
    }
}

impl BoundPrompts {
    pub fn bind(tape: &mut Tape, bank: &PromptBank, leaves: &mut Vec<(String, Var)>) -> Self {
        let mut bind_all = |ts: &[Tensor], name: &str| -> Vec<Var> {
            ts.iter()
                .enumerate()
                .map(|(i, t)| {
                    let v = tape.leaf(t);
                    leaves.push((format!("prompts.{name}.{i}"), v));
                    v
                })
                .collect()
        };
        Self {
            adaption: bind_all(&bank.adaption, "adaption"),
            gates: bind_all(&bank.gates, "gate"),
            prefix_keys: bind_all(&bank.prefix_keys, "prefix_key"),
            prefix_values: bind_all(&bank.prefix_values, "prefix_value"),
        }
    }

    /// Prompts active at `layer` under `flags`. Empty prompt tensors
    /// (`N = 0`) count as absent.
    pub fn for_layer(
        &self,
        tape: &Tape,
        cfg: &ModelConfig,
        layer: usize,
        flags: PromptFlags,
    ) -> LayerPrompts {
        let prefix = (flags.prefix && cfg.n_prefix > 0)
            .then(|| (self.prefix_keys[layer], self.prefix_values[layer]))
            .filter(|(k, _)| !tape.value(*k).is_empty());
        let adaption = (flags.adaption && cfg.n_adapt > 0 && cfg.is_adapt_layer(layer))
            .then(|| {
                let j = layer - cfg.first_adapt_layer();
                (self.adaption[j], self.gates[j])
            });
        LayerPrompts { prefix, adaption }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gates_start_at_zero_and_shapes_match() {
        let cfg = ModelConfig::default();
        let bank = PromptBank::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(bank.gates.iter().all(|g| g.item() == 0.0));
        bank.validate(&cfg).unwrap();
        assert_eq!(bank.tensors().len(), 2 * cfg.adapt_layers + 2 * cfg.n_layers);
    }

    #[test]
    fn zero_length_prompts_are_allowed() {
        let cfg = ModelConfig {
            n_adapt: 0,
            n_prefix: 0,
            ..ModelConfig::default()
        };
        let bank = PromptBank::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        bank.validate(&cfg).unwrap();
        assert_eq!(bank.prefix_keys[0].shape(), &[0, cfg.lm_dim]);
    }
}
