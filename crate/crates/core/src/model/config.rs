use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Hyperparameters of a Llama-style decoder (rms-norm, rotary, GQA, SwiGLU).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Number of decoder blocks. Zero is allowed (embedding → lm-head).
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub tie_embeddings: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::config(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::config("d_head must be even for rotary encoding"));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return Err(Error::config("rope_base must exceed 1 and norm_eps be positive"));
        }
        Ok(())
    }

    /// Width of the key/value projections.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads sharing each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Llama-3.2-3B as published (tied embeddings).
    pub fn llama_3_2_3b() -> Self {
        Self {
            vocab_size: 128_256,
            d_model: 3072,
            n_layers: 28,
            n_heads: 24,
            n_kv_heads: 8,
            d_head: 128,
            d_ff: 8192,
            max_seq: 131_072,
            tie_embeddings: true,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Llama-3.2-1B as published (tied embeddings).
    pub fn llama_3_2_1b() -> Self {
        Self {
            vocab_size: 128_256,
            d_model: 2048,
            n_layers: 16,
            n_heads: 32,
            n_kv_heads: 8,
            d_head: 64,
            d_ff: 8192,
            max_seq: 131_072,
            tie_embeddings: true,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Llama-3.1-70B as published (untied embeddings).
    pub fn llama_3_1_70b() -> Self {
        Self {
            vocab_size: 128_256,
            d_model: 8192,
            n_layers: 80,
            n_heads: 64,
            n_kv_heads: 8,
            d_head: 128,
            d_ff: 28_672,
            max_seq: 131_072,
            tie_embeddings: false,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Desk-scale target used by the experiments: 4 blocks, d_model 128.
    pub fn micro() -> Self {
        Self {
            vocab_size: 48,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 32,
            d_ff: 256,
            max_seq: 96,
            tie_embeddings: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Named published architecture, for the CLI.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llama-3.2-3b" => Ok(Self::llama_3_2_3b()),
            "llama-3.2-1b" => Ok(Self::llama_3_2_1b()),
            "llama-3.1-70b" => Ok(Self::llama_3_1_70b()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::config(format!("unknown architecture preset `{other}`"))),
        }
    }
}
