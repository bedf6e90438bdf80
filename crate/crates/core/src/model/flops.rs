use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TowerVariant};

/// Multiply-accumulate counts of one layer. Score and value contractions are split by the
/// tower whose queries issue them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub score_macs_text: u64,
    pub score_macs_vision: u64,
    pub value_macs: u64,
    pub projection_macs: u64,
    pub mlp_macs: u64,
}

impl LayerFlops {
    pub fn score_macs(&self) -> u64 {
        self.score_macs_text + self.score_macs_vision
    }

    pub fn total(&self) -> u64 {
        self.score_macs() + self.value_macs + self.projection_macs + self.mlp_macs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: TowerVariant,
    pub x_fuse: bool,
    pub text_tokens: u64,
    pub image_tokens: u64,
    pub layers: Vec<LayerFlops>,
}

impl FlopsReport {
    pub fn score_macs(&self) -> u64 {
        self.layers.iter().map(LayerFlops::score_macs).sum()
    }

    pub fn vision_score_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.score_macs_vision).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(LayerFlops::total).sum()
    }
}

/// Exact MAC counts for `n` text and `m` image positions under `cfg`.
pub fn count_flops(cfg: &ModelConfig, n: u64, m: u64) -> FlopsReport {
    let s = n + m;
    let d = cfg.dim as u64;
    let h = cfg.mlp_hidden as u64;
    let layer = match (cfg.variant, cfg.x_fuse) {
        (TowerVariant::SingleTower, _) => LayerFlops {
            score_macs_text: s * s * d,
            score_macs_vision: 0,
            value_macs: s * s * d,
            projection_macs: 4 * s * d * d,
            mlp_macs: 3 * s * d * h,
        },
        // The gate block issues queries at image positions only.
        (TowerVariant::GatedTower, _) => LayerFlops {
            score_macs_text: s * s * d,
            score_macs_vision: m * s * d,
            value_macs: s * s * d + m * s * d,
            projection_macs: 4 * s * d * d + (2 * m + 2 * s) * d * d,
            mlp_macs: 3 * (s + m) * d * h,
        },
        (TowerVariant::DualProjection, _) => LayerFlops {
            score_macs_text: n * s * d,
            score_macs_vision: m * s * d,
            value_macs: s * s * d,
            projection_macs: 4 * s * d * d,
            mlp_macs: 3 * s * d * h,
        },
        (TowerVariant::DualTower, false) => {
            let dv = cfg.vision_dim as u64;
            let hv = cfg.vision_mlp_hidden() as u64;
            LayerFlops {
                score_macs_text: n * s * d,
                score_macs_vision: m * s * dv,
                value_macs: n * s * d + m * s * dv,
                projection_macs: (2 * n + 2 * s) * d * d + (2 * m + 2 * s) * dv * dv,
                mlp_macs: 3 * (n * d * h + m * dv * hv),
            }
        }
        (TowerVariant::DualTower, true) => {
            let dv = cfg.vision_dim as u64;
            let hv = cfg.vision_mlp_hidden() as u64;
            let bridge = if dv != d { 2 * s * d * dv } else { 0 };
            LayerFlops {
                score_macs_text: s * s * d,
                score_macs_vision: s * s * dv,
                value_macs: s * s * (d + dv),
                projection_macs: 4 * s * (d * d + dv * dv) + bridge,
                mlp_macs: 3 * s * (d * h + dv * hv),
            }
        }
    };
    FlopsReport {
        variant: cfg.variant,
        x_fuse: cfg.x_fuse,
        text_tokens: n,
        image_tokens: m,
        layers: alloc::vec![layer; cfg.layers],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: TowerVariant, x_fuse: bool, d: usize) -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: d,
            vision_dim: d,
            heads: 1,
            variant,
            x_fuse,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn worked_example() {
        let single = count_flops(&cfg(TowerVariant::SingleTower, false, 8), 4, 4);
        let dual = count_flops(&cfg(TowerVariant::DualTower, false, 8), 4, 4);
        let fused = count_flops(&cfg(TowerVariant::DualTower, true, 8), 4, 4);
        assert_eq!(single.score_macs(), 512);
        assert_eq!(dual.score_macs(), 512);
        assert_eq!(fused.score_macs(), 1024);
    }

    #[test]
    fn no_image_tokens_no_vision_attention() {
        let dual = count_flops(&cfg(TowerVariant::DualTower, false, 16), 9, 0);
        assert_eq!(dual.vision_score_macs(), 0);
    }

    #[test]
    fn layers_multiply() {
        let mut c = cfg(TowerVariant::DualProjection, false, 8);
        let one = count_flops(&c, 3, 5).total();
        c.layers = 6;
        assert_eq!(count_flops(&c, 3, 5).total(), 6 * one);
    }
}
