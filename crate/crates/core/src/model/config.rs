//! Architecture hyperparameters and the four named size presets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
}

/// The named model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Large,
    Medium,
    Small,
    Miniature,
}

impl SizePreset {
    pub fn from_name(name: &str) -> Option<SizePreset> {
        match name {
            "large" => Some(SizePreset::Large),
            "medium" => Some(SizePreset::Medium),
            "small" => Some(SizePreset::Small),
            "miniature" => Some(SizePreset::Miniature),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub intermediate_size: usize,
    pub num_attention_heads: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub role: Role,
    /// Training-only dropout rate; inference always runs dense.
    pub dropout: f64,
}

impl ModelConfig {
    /// Preset table: (embedding, hidden, layers, intermediate, heads).
    fn preset_dims(preset: SizePreset, role: Role) -> (usize, usize, usize, usize, usize) {
        match (preset, role) {
            (SizePreset::Large, Role::Discriminator) => (128, 256, 8, 1024, 4),
            (SizePreset::Large, Role::Generator) => (128, 64, 8, 256, 1),
            (SizePreset::Medium, Role::Discriminator) => (128, 256, 4, 1024, 4),
            (SizePreset::Medium, Role::Generator) => (128, 64, 4, 256, 1),
            (SizePreset::Small, Role::Discriminator) => (128, 256, 2, 1024, 4),
            (SizePreset::Small, Role::Generator) => (128, 64, 2, 256, 1),
            (SizePreset::Miniature, Role::Discriminator) => (32, 64, 2, 256, 2),
            (SizePreset::Miniature, Role::Generator) => (16, 32, 2, 64, 1),
        }
    }

    pub fn preset(preset: SizePreset, role: Role, vocab_size: usize, max_position: usize) -> Self {
        let (embedding_size, hidden_size, num_hidden_layers, intermediate_size, num_attention_heads) =
            Self::preset_dims(preset, role);
        let config = ModelConfig {
            embedding_size,
            hidden_size,
            num_hidden_layers,
            intermediate_size,
            num_attention_heads,
            vocab_size,
            max_position,
            role,
            dropout: 0.1,
        };
        config.validate();
        config
    }

    pub fn validate(&self) {
        assert!(
            self.hidden_size % self.num_attention_heads == 0,
            "hidden_size must be divisible by num_attention_heads"
        );
        assert!(self.vocab_size > 0 && self.max_position > 0);
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    /// Exact parameter count from shape arithmetic.
    pub fn param_count(&self) -> usize {
        let e = self.embedding_size;
        let h = self.hidden_size;
        let i = self.intermediate_size;
        let v = self.vocab_size;
        let p = self.max_position;
        let mut n = v * e + p * e + 2 * e; // embeddings + embedding layernorm
        if e != h {
            n += e * h + h; // projection into the hidden width
        }
        let per_layer = 4 * (h * h + h)      // q, k, v, output
            + 2 * h                          // layernorm 1
            + (h * i + i) + (i * h + h)      // feed-forward
            + 2 * h; // layernorm 2
        n += self.num_hidden_layers * per_layer;
        n += match self.role {
            // dense H->E, layernorm over E, tied output bias over V
            Role::Generator => (h * e + e) + 2 * e + v,
            // per-token head and pooled sequence head
            Role::Discriminator => 2 * ((h * h + h) + (h + 1)),
        };
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets_match_reported_counts() {
        // Discriminator-only counts at vocabulary 20k, 256 positions.
        let cases = [
            (SizePreset::Large, 9_000_000.0, 0.05),
            (SizePreset::Medium, 6_000_000.0, 0.05),
            (SizePreset::Small, 4_300_000.0, 0.05),
            (SizePreset::Miniature, 750_000.0, 0.10),
        ];
        for (preset, reported, tol) in cases {
            let config = ModelConfig::preset(preset, Role::Discriminator, 20_000, 256);
            let count = config.param_count() as f64;
            let rel = (count - reported).abs() / reported;
            assert!(
                rel < tol,
                "{preset:?}: {count} vs reported {reported} (rel {rel:.4})"
            );
        }
    }

    #[test]
    fn generator_scaled_down() {
        let disc = ModelConfig::preset(SizePreset::Small, Role::Discriminator, 20_000, 256);
        let gen = ModelConfig::preset(SizePreset::Small, Role::Generator, 20_000, 256);
        assert!(gen.param_count() < disc.param_count());
        assert_eq!(gen.hidden_size * 4, disc.hidden_size);
    }

    #[test]
    #[should_panic(expected = "divisible")]
    fn invalid_head_split_rejected() {
        ModelConfig {
            embedding_size: 8,
            hidden_size: 10,
            num_hidden_layers: 1,
            intermediate_size: 16,
            num_attention_heads: 4,
            vocab_size: 10,
            max_position: 8,
            role: Role::Discriminator,
            dropout: 0.0,
        }
        .validate();
    }
}
