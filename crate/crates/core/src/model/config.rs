use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Vocabulary, MAX_SEQ_LEN, PATCH_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TowerVariant {
    /// One shared, fully trainable stack over both modalities.
    SingleTower,
    /// Frozen text block plus a trainable duplicate whose output is added with a learned gate.
    GatedTower,
    /// Modality-specific Q/K/V, output projection and MLP with joint attention.
    DualProjection,
    /// Frozen text tower and trainable vision tower, outputs routed per position.
    DualTower,
}

impl TowerVariant {
    pub const ALL: [TowerVariant; 4] = [
        TowerVariant::SingleTower,
        TowerVariant::GatedTower,
        TowerVariant::DualProjection,
        TowerVariant::DualTower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TowerVariant::SingleTower => "single-tower",
            TowerVariant::GatedTower => "gated-tower",
            TowerVariant::DualProjection => "dual-projection",
            TowerVariant::DualTower => "dual-tower",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the text tower is frozen in stage 2.
    pub fn freezes_text(self) -> bool {
        self != TowerVariant::SingleTower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub vision_dim: usize,
    pub heads: usize,
    /// SwiGLU hidden width of the text tower.
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub max_seq_len: usize,
    /// Sinusoidal timestep features projected into the image embedding.
    pub time_features: usize,
    pub variant: TowerVariant,
    pub x_fuse: bool,
    /// Block whose vision-stream output feeds the alignment loss (1-based).
    pub align_layer: usize,
    pub caption_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 96,
            vision_dim: 96,
            heads: 6,
            mlp_hidden: 256,
            vocab_size: Vocabulary::new().len(),
            patch_dim: PATCH_DIM,
            max_seq_len: MAX_SEQ_LEN,
            time_features: 16,
            variant: TowerVariant::DualTower,
            x_fuse: false,
            align_layer: 3,
            caption_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Asymmetric towers: a narrower vision stack bridged by X-Fuse projections. Both
    /// towers share the head count, so it must divide 96 and 64.
    pub fn asymmetric() -> Self {
        Self {
            vision_dim: 64,
            heads: 4,
            x_fuse: true,
            ..Self::default()
        }
    }

    pub fn vision_mlp_hidden(&self) -> usize {
        if self.vision_dim == self.dim {
            self.mlp_hidden
        } else {
            (self.mlp_hidden * self.vision_dim).div_ceil(self.dim)
        }
    }

    /// Dimension of the image stream's hidden states.
    pub fn image_dim(&self) -> usize {
        if self.variant == TowerVariant::DualTower {
            self.vision_dim
        } else {
            self.dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return fail("layers, dim and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.vision_dim.is_multiple_of(self.heads) {
            return fail(format!("vision_dim {} not divisible by {} heads", self.vision_dim, self.heads));
        }
        if self.x_fuse && self.variant != TowerVariant::DualTower {
            return fail(format!("x_fuse requires dual-tower, not {}", self.variant.name()));
        }
        if self.vision_dim != self.dim && !self.x_fuse {
            return fail(format!(
                "vision_dim {} differs from dim {} without x_fuse projections",
                self.vision_dim, self.dim
            ));
        }
        if self.align_layer > self.layers {
            return fail(format!("align_layer {} beyond {} layers", self.align_layer, self.layers));
        }
        if self.patch_dim != PATCH_DIM {
            return fail(format!("patch_dim must be {PATCH_DIM}"));
        }
        if self.max_seq_len < MAX_SEQ_LEN || self.vocab_size < Vocabulary::new().len() {
            return fail("max_seq_len or vocab_size too small for the synthetic world".into());
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return fail("time_features must be a positive even number".into());
        }
        if !(0.0..1.0).contains(&self.caption_dropout) {
            return fail("caption_dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_asymmetric_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::asymmetric().validate().unwrap();
        assert_eq!(ModelConfig::default().align_layer * 2, ModelConfig::default().layers);
    }

    #[test]
    fn invalid_combinations() {
        let bad = [
            ModelConfig { heads: 5, ..Default::default() },
            ModelConfig { x_fuse: true, variant: TowerVariant::SingleTower, ..Default::default() },
            ModelConfig { vision_dim: 64, ..Default::default() },
            ModelConfig { align_layer: 7, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in TowerVariant::ALL {
            assert_eq!(TowerVariant::parse(v.name()), Some(v));
        }
    }
}
