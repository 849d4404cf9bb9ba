use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Upper bound on decoded speakers.
    pub max_speakers: usize,
    pub dropout: f64,
    /// Binarization threshold for decoder outputs.
    pub threshold: f64,
    /// Output rows of the fixed-speaker baseline head; 0 leaves it out.
    #[serde(default)]
    pub baseline_speakers: usize,
}

impl ModelConfig {
    /// Small profile used by tests and the quick-start pipeline.
    pub fn desk() -> Self {
        ModelConfig {
            feat_dim: 16,
            hidden_dim: 64,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 256,
            max_speakers: 4,
            dropout: 0.1,
            threshold: 0.5,
            baseline_speakers: 4,
        }
    }

    /// Four blocks of 256 units with four heads, for two-speaker data.
    pub fn two_speaker() -> Self {
        ModelConfig {
            hidden_dim: 256,
            num_blocks: 4,
            num_heads: 4,
            ffn_dim: 1024,
            max_speakers: 2,
            baseline_speakers: 2,
            ..Self::desk()
        }
    }

    /// Four blocks of 384 units with six heads, for one to four speakers.
    /// `max_speakers` leaves one iteration for the stop decision after
    /// four speakers.
    pub fn variable_speaker() -> Self {
        ModelConfig {
            hidden_dim: 384,
            num_blocks: 4,
            num_heads: 6,
            ffn_dim: 1536,
            max_speakers: 5,
            baseline_speakers: 4,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "2spk" => Ok(Self::two_speaker()),
            "vspk" => Ok(Self::variable_speaker()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk, 2spk or vspk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.feat_dim == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return fail("feat_dim, hidden_dim and ffn_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.max_speakers == 0 {
            return fail("max_speakers must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_shapes_validate() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig::two_speaker(),
            ModelConfig::variable_speaker(),
        ] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::two_speaker().head_dim(), 64);
        assert_eq!(ModelConfig::variable_speaker().head_dim(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig {
                num_heads: 3,
                ..ModelConfig::desk()
            },
            ModelConfig {
                num_blocks: 0,
                ..ModelConfig::desk()
            },
            ModelConfig {
                max_speakers: 0,
                ..ModelConfig::desk()
            },
            ModelConfig {
                threshold: 1.0,
                ..ModelConfig::desk()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(ModelConfig::profile("huge").is_err());
    }
}
