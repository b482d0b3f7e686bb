use crate::error::{config_err, Result};
use crate::position_encoding::{PeConfig, PeKind};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Training context length; sizes the absolute and relative tables.
    pub context_t: usize,
    pub ffn_mult: f64,
    pub pe: PeConfig,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            context_t: 256,
            ffn_mult: 4.0,
            pe: PeConfig::default(),
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ffn(&self) -> usize {
        ((self.d_model as f64) * self.ffn_mult).round().max(1.0) as usize
    }

    /// Rows of the relative-offset table.
    pub fn relative_rows(&self) -> usize {
        match self.pe.variant.kind {
            PeKind::RelativeCapped => self.pe.relative_cap.unwrap_or(self.context_t),
            _ => self.context_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return config_err("model.vocab_size must be positive");
        }
        if self.n_heads == 0 || self.n_layers == 0 || self.d_model == 0 {
            return config_err("model.d_model, model.n_heads and model.n_layers must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return config_err(format!(
                "model.d_model={} is not divisible by model.n_heads={}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_t == 0 {
            return config_err("model.context_t must be at least 1");
        }
        if !(self.ffn_mult > 0.0) {
            return config_err("model.ffn_mult must be positive");
        }
        if self.pe.variant.uses_rope() && self.d_head() % 2 != 0 {
            return config_err(format!(
                "rotary encoding needs an even head dimension, got {}",
                self.d_head()
            ));
        }
        self.pe.validate(self.n_heads)
    }
}
