use crate::error::{Error, Result};

/// Every dimensional hyperparameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Vision feature width `D`.
    pub vision_dim: usize,
    /// LM embedding width `D_L`.
    pub lm_dim: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of top layers that receive adaption prompts (`L'`).
    pub adapt_layers: usize,
    /// Adaption prompt rows per layer (`N_a`).
    pub n_adapt: usize,
    /// Prefix key/value rows per layer (`N_p`).
    pub n_prefix: usize,
    pub max_seq_len: usize,
    /// Patches per image side; `N_v = patch_grid²`.
    pub patch_grid: usize,
    pub image_channels: usize,
    pub image_size: usize,
    pub lm_ffn_hidden: usize,
    pub vision_heads: usize,
    pub vision_blocks: usize,
    pub vision_ffn_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision_dim: 32,
            lm_dim: 64,
            vocab_size: crate::data::Tokenizer::new().vocab_size(),
            n_layers: 4,
            n_heads: 4,
            adapt_layers: 2,
            n_adapt: 10,
            n_prefix: 10,
            max_seq_len: 64,
            patch_grid: 4,
            image_channels: 3,
            image_size: 32,
            lm_ffn_hidden: 384,
            vision_heads: 2,
            vision_blocks: 2,
            vision_ffn_hidden: 32,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn head_dim(&self) -> usize {
        self.lm_dim / self.n_heads
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid
    }

    /// Features per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size() * self.patch_size()
    }

    /// First layer index that carries an adaption branch.
    pub fn first_adapt_layer(&self) -> usize {
        self.n_layers - self.adapt_layers
    }

    pub fn is_adapt_layer(&self, layer: usize) -> bool {
        layer >= self.first_adapt_layer()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lm_dim == 0 || self.n_heads == 0 || self.lm_dim % self.n_heads != 0 {
            return bad(format!(
                "lm_dim {} must be a positive multiple of n_heads {}",
                self.lm_dim, self.n_heads
            ));
        }
        if self.vision_dim == 0
            || self.vision_heads == 0
            || self.vision_dim % self.vision_heads != 0
        {
            return bad(format!(
                "vision_dim {} must be a positive multiple of vision_heads {}",
                self.vision_dim, self.vision_heads
            ));
        }
        if self.adapt_layers > self.n_layers {
            return bad(format!(
                "adapt_layers {} exceeds n_layers {}",
                self.adapt_layers, self.n_layers
            ));
        }
        if self.patch_grid == 0 || self.image_size % self.patch_grid != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_grid {}",
                self.image_size, self.patch_grid
            ));
        }
        if self.vocab_size < 2 || self.n_layers == 0 || self.lm_ffn_hidden == 0 {
            return bad("vocab_size, n_layers and lm_ffn_hidden must be positive".into());
        }
        if self.vision_ffn_hidden == 0 || self.image_channels == 0 {
            return bad("vision_ffn_hidden and image_channels must be positive".into());
        }
        if self.max_seq_len <= self.n_visual() + 1 {
            return bad(format!(
                "max_seq_len {} leaves no room after {} visual tokens",
                self.max_seq_len,
                self.n_visual()
            ));
        }
        Ok(())
    }
}

macro_rules! config_fields {
    ($($name:ident),* $(,)?) => {
        impl ModelConfig {
            /// Every field name, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// `(key, value)` pairs with every value widened to f64.
            pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
                vec![$((stringify!($name), self.$name as f64)),*]
            }

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.trim().parse().map_err(|_| {
                            Error::Config(format!("bad value {value:?} for {key}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                }
                Ok(())
            }
        }
    };
}

config_fields!(
    vision_dim,
    lm_dim,
    vocab_size,
    n_layers,
    n_heads,
    adapt_layers,
    n_adapt,
    n_prefix,
    max_seq_len,
    patch_grid,
    image_channels,
    image_size,
    lm_ffn_hidden,
    vision_heads,
    vision_blocks,
    vision_ffn_hidden,
    ln_eps,
);

impl ModelConfig {
    /// Rebuilds a configuration from `(key, value)` pairs as written by
    /// [`ModelConfig::to_pairs`].
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            let text = if k == "ln_eps" {
                format!("{v:e}")
            } else {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("non-integer value {v} for {k}")));
                }
                format!("{}", v as u64)
            };
            c.set(k, &text)?;
        }
        Ok(c)
    }

    /// Closed-form trainable count with a frozen LM: vision encoder,
    /// projection, adaption prompts plus gates, and prefix rows.
    pub fn trainable_params_formula(&self) -> usize {
        let block = |d: usize, h: usize| 4 * d * d + 2 * d + h * d + h + d * h + d + 2 * d;
        let vision = self.vision_dim * self.patch_dim()
            + self.vision_dim
            + self.n_visual() * self.vision_dim
            + self.vision_blocks * block(self.vision_dim, self.vision_ffn_hidden);
        vision
            + self.lm_dim * self.vision_dim
            + self.adapt_layers * (self.n_adapt * self.lm_dim + 1)
            + self.n_layers * 2 * self.n_prefix * self.lm_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig {
            lm_dim: 16,
            ln_eps: 3e-6,
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_pairs(c.to_pairs()).unwrap();
        assert_eq!(back, c);
        assert_eq!(ModelConfig::KEYS.len(), c.to_pairs().len());
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut c = ModelConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("lm_dim", "x"), Err(Error::Config(_))));
        c.set("lm_dim", "32").unwrap();
        assert_eq!(c.lm_dim, 32);
    }

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_visual(), 16);
        assert_eq!(c.patch_dim(), 192);
    }
}
