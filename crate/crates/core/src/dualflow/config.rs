use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentcodec::{latent_dims, LATENT_CHANNELS};

/// Architecture variants used for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Full-copy motion branch with zero-linear fusion and the pose module.
    #[default]
    Full,
    /// Video branch only, fine-tuned on the video loss.
    NoMotion,
    /// Motion frames carry normals but no part semantics.
    NormalOnly,
    /// Motion frames carry part semantics but no normals.
    SemanticsOnly,
    /// One branch over channel-concatenated video and motion latents.
    JointLatent,
    /// Motion branch holds copies of every other video block only.
    DistributedCopy,
    /// The motion branch continues from the fused features.
    PassFused,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoMotion,
        Ablation::NormalOnly,
        Ablation::SemanticsOnly,
        Ablation::JointLatent,
        Ablation::DistributedCopy,
        Ablation::PassFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMotion => "no-motion",
            Ablation::NormalOnly => "normal-only",
            Ablation::SemanticsOnly => "semantics-only",
            Ablation::JointLatent => "joint-latent",
            Ablation::DistributedCopy => "distributed-copy",
            Ablation::PassFused => "pass-fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}`")))
    }

    pub fn has_motion(self) -> bool {
        self != Ablation::NoMotion
    }

    pub fn has_separate_motion_branch(self) -> bool {
        !matches!(self, Ablation::NoMotion | Ablation::JointLatent)
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub width_d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub null_token: usize,
    pub time_freqs: usize,
    pub query_dim: usize,
    pub query_heads: usize,
    pub query_layers: usize,
    pub joints: usize,
    /// Lower bound on `1 - t` when turning clean-latent predictions into velocities.
    pub min_one_minus_t: f64,
    /// Assumed per-entry variance of a clean latent around its first slice;
    /// sets how fast the clean-latent prior shifts from that slice to `x_t`.
    /// Zero keeps the prior at the first slice.
    pub anchor_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 17,
            height: 64,
            width: 64,
            width_d: 128,
            heads: 4,
            blocks: 4,
            ffn_mult: 4,
            vocab: 16,
            null_token: 15,
            time_freqs: 64,
            query_dim: 64,
            query_heads: 4,
            query_layers: 6,
            joints: 8,
            min_one_minus_t: 0.05,
            anchor_var: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        latent_dims(self.frames, self.height, self.width)?;
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.width_d == 0 || self.heads == 0 || self.width_d % self.heads != 0 {
            return bad("model width must be a positive multiple of the head count");
        }
        if self.query_dim == 0 || self.query_heads == 0 || self.query_dim % self.query_heads != 0 {
            return bad("query width must be a positive multiple of the query head count");
        }
        if self.blocks == 0 || self.query_layers == 0 || self.ffn_mult == 0 || self.joints == 0 {
            return bad("block, layer, ffn and joint counts must be positive");
        }
        if self.null_token >= self.vocab {
            return bad("null token must lie inside the vocabulary");
        }
        if self.time_freqs == 0 {
            return bad("time embedding needs at least one frequency");
        }
        if !(self.min_one_minus_t > 0.0 && self.min_one_minus_t <= 1.0) {
            return bad("min_one_minus_t must lie in (0, 1]");
        }
        if !(self.anchor_var >= 0.0 && self.anchor_var.is_finite()) {
            return bad("anchor_var must be finite and non-negative");
        }
        Ok(())
    }

    /// `(t_lat, h, w)` token grid.
    pub fn grid(&self) -> (usize, usize, usize) {
        latent_dims(self.frames, self.height, self.width).expect("validated geometry")
    }

    pub fn tokens(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }

    /// Tokens in one temporal slice.
    pub fn tokens_per_slice(&self) -> usize {
        let (_, h, w) = self.grid();
        h * w
    }

    pub fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    pub fn pose_dim(&self) -> usize {
        self.joints * 3
    }

    pub fn groups(&self) -> usize {
        (self.frames - 1) / 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("nope").is_err());
    }

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), (5, 4, 4));
        assert_eq!(c.tokens(), 80);
        assert_eq!(c.groups(), 4);
    }
}
