use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_rms_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters of one family member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
}

impl ModelConfig {
    /// A config with `d_model = n_heads * d_head` and default RoPE/RMSNorm
    /// constants.
    pub fn new(
        vocab_size: usize,
        n_heads: usize,
        d_head: usize,
        d_ff: usize,
        n_layers: usize,
        seq_len: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            d_model: n_heads * d_head,
            d_ff,
            n_layers,
            n_heads,
            d_head,
            seq_len,
            rope_base: default_rope_base(),
            rms_eps: default_rms_eps(),
        }
    }

    /// Width of the concatenated attention heads.
    pub fn attn_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::invalid("d_head must be even for rotary embeddings"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::invalid("rope_base must be > 1"));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps > 0.0) {
            return Err(Error::invalid("rms_eps must be positive"));
        }
        Ok(())
    }

    /// Exact parameter count: untied embedding and unembedding, per-layer
    /// attention, SwiGLU MLP and two norm gains, plus the final norm.
    pub fn count_params(&self) -> u64 {
        let v = self.vocab_size as u64;
        let d = self.d_model as u64;
        let a = self.attn_dim() as u64;
        let f = self.d_ff as u64;
        let per_layer = 2 * d + 3 * a * d + d * a + 3 * f * d;
        2 * v * d + d + self.n_layers as u64 * per_layer
    }
}
