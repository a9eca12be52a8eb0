use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

/// Shape and seed of a toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Config with `hidden_dim = num_heads * head_dim`.
    pub fn with_head_dim(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        rng_seed: u64,
    ) -> Self {
        Self { num_layers, num_heads, hidden_dim: num_heads * head_dim, vocab_size, max_seq_len, rng_seed }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if value == 0 {
                return Err(ModelError::ZeroDimension(name));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::HeadsDoNotDivide { hidden_dim: self.hidden_dim, num_heads: self.num_heads });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies a weight set.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Named configs referenced by the CLI and the docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
}

impl Preset {
    pub fn config(self, vocab_size: usize, rng_seed: u64) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::with_head_dim(2, 4, 8, vocab_size, 8192, rng_seed),
            Preset::Small => ModelConfig::with_head_dim(4, 8, 16, vocab_size, 8192, rng_seed),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            other => Err(format!("unknown preset `{other}` (expected `tiny` or `small`)")),
        }
    }
}
