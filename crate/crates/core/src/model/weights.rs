use alloc::format;
use alloc::vec::Vec;

use super::config::{ModelConfig, TowerVariant};
use crate::error::Result;
use crate::params::{ParamId, ParameterSet};
use crate::real::Real;
use crate::rng::RngStream;
use crate::synth::N_PATCHES;
use crate::tensor::Tensor;

const BLOCK_PARTS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ImageIds {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub pos_emb: ParamId,
    pub time_proj: ParamId,
    pub final_norm: ParamId,
    pub vel_head: ParamId,
    pub vel_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct XFuseIds {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub alpha_img: ParamId,
    pub beta_img: ParamId,
    pub proj_t2v: Option<ParamId>,
    pub proj_v2t: Option<ParamId>,
}

/// Parameter handles resolved by name, so a model can be rebuilt from any checkpoint.
#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub text_blocks: Vec<BlockIds>,
    pub final_norm: ParamId,
    pub head: ParamId,
    pub image: Option<ImageIds>,
    pub vision_blocks: Option<Vec<BlockIds>>,
    pub gamma: Option<Vec<ParamId>>,
    pub xfuse: Option<Vec<XFuseIds>>,
    pub align: Option<ParamId>,
}

fn need<T: Real>(ps: &ParameterSet<T>, name: &str) -> Result<ParamId> {
    ps.id(name)
}

fn block_ids<T: Real>(ps: &ParameterSet<T>, prefix: &str) -> Result<BlockIds> {
    let g = |p: &str| need(ps, &format!("{prefix}.{p}"));
    Ok(BlockIds {
        attn_norm: g("attn_norm")?,
        wq: g("wq")?,
        wk: g("wk")?,
        wv: g("wv")?,
        wo: g("wo")?,
        mlp_norm: g("mlp_norm")?,
        w_gate: g("w_gate")?,
        w_up: g("w_up")?,
        w_down: g("w_down")?,
    })
}

impl ModelIds {
    pub fn resolve<T: Real>(cfg: &ModelConfig, ps: &ParameterSet<T>) -> Result<Self> {
        let text_blocks = (0..cfg.layers)
            .map(|l| block_ids(ps, &format!("text.blocks.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let image = if ps.contains("image.patch_proj") {
            let g = |p: &str| need(ps, &format!("image.{p}"));
            Some(ImageIds {
                patch_proj: g("patch_proj")?,
                patch_bias: g("patch_bias")?,
                pos_emb: g("pos_emb")?,
                time_proj: g("time_proj")?,
                final_norm: g("final_norm")?,
                vel_head: g("vel_head")?,
                vel_bias: g("vel_bias")?,
            })
        } else {
            None
        };
        let multimodal = image.is_some();
        let wants_vision = multimodal && cfg.variant != TowerVariant::SingleTower;
        let vision_blocks = if wants_vision {
            Some(
                (0..cfg.layers)
                    .map(|l| block_ids(ps, &format!("vision.blocks.{l}")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let gamma = if multimodal && cfg.variant == TowerVariant::GatedTower {
            Some(
                (0..cfg.layers)
                    .map(|l| need(ps, &format!("gate.gamma.{l}")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let xfuse = if multimodal && cfg.x_fuse {
            let bridged = cfg.vision_dim != cfg.dim;
            Some(
                (0..cfg.layers)
                    .map(|l| {
                        let g = |p: &str| need(ps, &format!("xfuse.{l}.{p}"));
                        Ok(XFuseIds {
                            alpha: g("alpha")?,
                            beta: g("beta")?,
                            alpha_img: g("alpha_img")?,
                            beta_img: g("beta_img")?,
                            proj_t2v: if bridged { Some(g("proj_t2v")?) } else { None },
                            proj_v2t: if bridged { Some(g("proj_v2t")?) } else { None },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            tok_emb: need(ps, "text.tok_emb")?,
            pos_emb: need(ps, "text.pos_emb")?,
            text_blocks,
            final_norm: need(ps, "text.final_norm")?,
            head: need(ps, "text.head")?,
            image,
            vision_blocks,
            gamma,
            xfuse,
            align: ps.id("align.proj").ok(),
        })
    }
}

fn randn<T: Real>(rng: &RngStream, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::randn(shape, std, &mut rng.split(name))
}

fn inv_sqrt(n: usize) -> f64 {
    1.0 / num_traits::Float::sqrt(n as f64)
}

fn insert_block<T: Real>(
    ps: &mut ParameterSet<T>,
    rng: &RngStream,
    prefix: &str,
    dim: usize,
    hidden: usize,
    layers: usize,
) -> Result<()> {
    let residual = inv_sqrt(2 * layers);
    for part in BLOCK_PARTS {
        let name = format!("{prefix}.{part}");
        let t = match part {
            "attn_norm" | "mlp_norm" => Tensor::ones(&[dim]),
            "wq" | "wk" | "wv" => randn(rng, &name, &[dim, dim], inv_sqrt(dim)),
            "wo" => randn(rng, &name, &[dim, dim], inv_sqrt(dim) * residual),
            "w_gate" | "w_up" => randn(rng, &name, &[dim, hidden], inv_sqrt(dim)),
            _ => randn(rng, &name, &[hidden, dim], inv_sqrt(hidden) * residual),
        };
        ps.insert(&name, t)?;
    }
    Ok(())
}

/// Stage-1 parameters: the text language model.
pub(crate) fn init_text<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    let rng = RngStream::new(seed).split("init.text");
    let mut ps = ParameterSet::new();
    let d = cfg.dim;
    ps.insert("text.tok_emb", randn(&rng, "tok_emb", &[cfg.vocab_size, d], 0.5))?;
    ps.insert("text.pos_emb", randn(&rng, "pos_emb", &[cfg.max_seq_len, d], 0.5))?;
    for l in 0..cfg.layers {
        let prefix = format!("text.blocks.{l}");
        insert_block(&mut ps, &rng, &prefix, d, cfg.mlp_hidden, cfg.layers)?;
    }
    ps.insert("text.final_norm", Tensor::ones(&[d]))?;
    ps.insert("text.head", randn(&rng, "head", &[d, cfg.vocab_size], inv_sqrt(d)))?;
    Ok(ps)
}

/// Extends stage-1 parameters with everything stage 2 of `cfg.variant` trains. Vision
/// blocks are copies of the matching text blocks when the widths agree.
pub(crate) fn extend_multimodal<T: Real>(
    cfg: &ModelConfig,
    base: &ParameterSet<T>,
    seed: u64,
) -> Result<ParameterSet<T>> {
    let rng = RngStream::new(seed).split("init.multimodal");
    let mut ps = base.clone();
    for (_, p) in ps.iter_mut() {
        p.frozen = false;
        p.grad = None;
    }
    let dv = cfg.image_dim();
    let g = |n: &str| format!("image.{n}");
    ps.insert(&g("patch_proj"), randn(&rng, "patch_proj", &[cfg.patch_dim, dv], inv_sqrt(cfg.patch_dim)))?;
    ps.insert(&g("patch_bias"), Tensor::zeros(&[dv]))?;
    ps.insert(&g("pos_emb"), randn(&rng, "img_pos_emb", &[N_PATCHES, dv], 0.5))?;
    ps.insert(&g("time_proj"), randn(&rng, "time_proj", &[cfg.time_features, dv], inv_sqrt(cfg.time_features)))?;
    ps.insert(&g("final_norm"), Tensor::ones(&[dv]))?;
    ps.insert(&g("vel_head"), randn(&rng, "vel_head", &[dv, cfg.patch_dim], 0.02))?;
    ps.insert(&g("vel_bias"), Tensor::zeros(&[cfg.patch_dim]))?;

    if cfg.variant != TowerVariant::SingleTower {
        for l in 0..cfg.layers {
            let prefix = format!("vision.blocks.{l}");
            if cfg.vision_dim == cfg.dim || cfg.variant != TowerVariant::DualTower {
                for part in BLOCK_PARTS {
                    let src = base.by_name(&format!("text.blocks.{l}.{part}"))?;
                    ps.insert(&format!("{prefix}.{part}"), src.value.clone())?;
                }
            } else {
                insert_block(&mut ps, &rng, &prefix, dv, cfg.vision_mlp_hidden(), cfg.layers)?;
            }
        }
    }
    if cfg.variant == TowerVariant::GatedTower {
        for l in 0..cfg.layers {
            ps.insert(&format!("gate.gamma.{l}"), Tensor::zeros(&[1]))?;
        }
    }
    if cfg.x_fuse {
        for l in 0..cfg.layers {
            let p = |n: &str| format!("xfuse.{l}.{n}");
            ps.insert(&p("alpha"), Tensor::ones(&[1]))?;
            ps.insert(&p("beta"), Tensor::zeros(&[1]))?;
            ps.insert(&p("alpha_img"), Tensor::ones(&[1]))?;
            ps.insert(&p("beta_img"), Tensor::zeros(&[1]))?;
            if cfg.vision_dim != cfg.dim {
                ps.insert(&p("proj_t2v"), randn(&rng, &p("proj_t2v"), &[cfg.dim, dv], inv_sqrt(cfg.dim)))?;
                ps.insert(&p("proj_v2t"), randn(&rng, &p("proj_v2t"), &[dv, cfg.dim], inv_sqrt(dv)))?;
            }
        }
    }
    if cfg.variant.freezes_text() {
        ps.freeze_prefix("text.");
    }
    Ok(ps)
}

pub(crate) fn insert_alignment<T: Real>(
    cfg: &ModelConfig,
    ps: &mut ParameterSet<T>,
    teacher_dim: usize,
    seed: u64,
) -> Result<ParamId> {
    let rng = RngStream::new(seed).split("init.align");
    let dv = cfg.image_dim();
    ps.insert("align.proj", randn(&rng, "align", &[dv, teacher_dim], inv_sqrt(dv)))
}
