//! The transformer: a frozen-able text stack, four ways of attaching the image modality,
//! X-Fuse, the output heads and an analytic FLOPs count.

mod batch;
mod config;
mod flops;
mod weights;

use alloc::rc::Rc;
use alloc::vec::Vec;

pub use batch::{timestep_features, Batch};
pub use config::{ModelConfig, TowerVariant};
pub use flops::{count_flops, FlopsReport, LayerFlops};

use crate::autodiff::{AttentionLayout, Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::Tensor;
use weights::{BlockIds, ModelIds};

/// Values produced by one forward pass, recorded on the caller's tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n_text, vocab]`, one row per text position.
    pub logits: Var,
    /// `[n_image, patch_dim]`, present iff the batch has image positions.
    pub velocity: Option<Var>,
    /// Image-stream hidden states: entry 0 is the embedding, entry `l` the output of block `l`.
    /// Empty when the batch has no image positions.
    pub vision_hidden: Vec<Var>,
}

/// Detached forward results.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub logits: Tensor<T>,
    pub velocity: Option<Tensor<T>>,
    pub vision_hidden: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
    ids: ModelIds,
}

impl<T: Real> Model<T> {
    /// Fresh stage-1 language model.
    pub fn text_only(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = weights::init_text(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Stage-2 model of `config.variant` grown from stage-1 parameters. Whatever the base
    /// carried beyond the text stack is discarded.
    pub fn multimodal(config: ModelConfig, stage1: &ParameterSet<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut base = ParameterSet::new();
        for (_, p) in stage1.iter().filter(|(_, p)| p.name.starts_with("text.")) {
            base.insert(&p.name, p.value.clone())?;
        }
        let params = weights::extend_multimodal(&config, &base, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<T> {
        self.params
    }

    pub fn is_multimodal(&self) -> bool {
        self.ids.image.is_some()
    }

    pub fn has_alignment(&self) -> bool {
        self.ids.align.is_some()
    }

    /// Adds the trainable alignment projection `[image_dim, teacher_dim]`.
    pub fn add_alignment(&mut self, teacher_dim: usize, seed: u64) -> Result<()> {
        if self.ids.align.is_none() {
            self.ids.align = Some(weights::insert_alignment(&self.config, &mut self.params, teacher_dim, seed)?);
        }
        Ok(())
    }

    pub fn align_var(&self, bound: &Bound) -> Option<Var> {
        self.ids.align.map(|id| bound.get(id))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Forward pass without gradient bookkeeping for the caller.
    pub fn infer(&self, batch: &Batch<T>) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let out = self.forward(&mut tape, &bound, batch)?;
        Ok(Inference {
            logits: tape.tensor(out.logits),
            velocity: out.velocity.map(|v| tape.tensor(v)),
            vision_hidden: out.vision_hidden.iter().map(|&v| tape.tensor(v)).collect(),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, batch: &Batch<T>) -> Result<ForwardOutput> {
        let ids = &self.ids;
        let (xt, xi, vision_hidden) = self.trunk(tape, b, batch, self.config.layers)?;
        let n = tape.rmsnorm(xt, b.get(ids.final_norm))?;
        let logits = tape.matmul(n, b.get(ids.head))?;
        let velocity = match (xi, ids.image) {
            (Some(x), Some(img)) => {
                let n = tape.rmsnorm(x, b.get(img.final_norm))?;
                let v = tape.matmul(n, b.get(img.vel_head))?;
                Some(tape.add_bias(v, b.get(img.vel_bias))?)
            }
            _ => None,
        };
        Ok(ForwardOutput {
            logits,
            velocity,
            vision_hidden,
        })
    }

    /// Image-stream hidden state after block `layer` (0 = embedding), evaluating only the
    /// blocks below it.
    pub fn vision_features(&self, tape: &mut Tape<T>, b: &Bound, batch: &Batch<T>, layer: usize) -> Result<Var> {
        if layer > self.config.layers {
            return Err(Error::config(alloc::format!(
                "layer {layer} beyond {} layers",
                self.config.layers
            )));
        }
        let (_, _, hidden) = self.trunk(tape, b, batch, layer)?;
        hidden
            .get(layer)
            .copied()
            .ok_or_else(|| Error::contract("batch has no image positions"))
    }

    fn trunk(&self, tape: &mut Tape<T>, b: &Bound, batch: &Batch<T>, depth: usize) -> Result<(Var, Option<Var>, Vec<Var>)> {
        let ids = &self.ids;
        let has_image = batch.n_image() > 0;
        if has_image && ids.image.is_none() {
            return Err(Error::config("text-only model given image positions"));
        }
        let tok = tape.embedding(b.get(ids.tok_emb), &batch.token_ids)?;
        let pos = tape.embedding(b.get(ids.pos_emb), &batch.text_pos)?;
        let mut xt = tape.add(tok, pos)?;
        let mut xi = match (has_image, ids.image) {
            (true, Some(img)) => {
                let p = tape.constant(batch.patches.clone());
                let p = tape.matmul(p, b.get(img.patch_proj))?;
                let p = tape.add_bias(p, b.get(img.patch_bias))?;
                let pe = tape.embedding(b.get(img.pos_emb), &batch.patch_pos)?;
                let tf = tape.constant(batch.time_features.clone());
                let te = tape.matmul(tf, b.get(img.time_proj))?;
                let x = tape.add(p, pe)?;
                Some(tape.add(x, te)?)
            }
            _ => None,
        };
        let mut vision_hidden = Vec::new();
        if let Some(x) = xi {
            vision_hidden.push(x);
        }
        let all = batch.all_rows();
        let plain = (!has_image && !self.config.x_fuse) || ids.image.is_none();
        for l in 0..depth {
            let text = &ids.text_blocks[l];
            if plain {
                xt = block(tape, b, text, xt, &batch.text_rows, &batch.layout_text)?;
                continue;
            }
            let vision = ids.vision_blocks.as_ref().map(|v| &v[l]);
            let (nt, ni) = match (self.config.variant, self.config.x_fuse) {
                (TowerVariant::DualTower, true) => self.xfuse_layer(tape, b, batch, l, xt, xi, &all)?,
                (TowerVariant::DualTower, false) => {
                    let vision = vision.expect("resolved with image params");
                    let full = join(tape, batch, xt, xi)?;
                    let nt = block(tape, b, text, full, &batch.text_rows, &batch.layout_text)?;
                    let ni = match xi {
                        Some(_) => Some(block(tape, b, vision, full, &batch.image_rows, &batch.layout_image)?),
                        None => None,
                    };
                    (nt, ni)
                }
                (TowerVariant::SingleTower, _) => {
                    let full = join(tape, batch, xt, xi)?;
                    let h = block(tape, b, text, full, &all, &batch.layout_all)?;
                    split(tape, batch, h)?
                }
                (TowerVariant::GatedTower, _) => {
                    let full = join(tape, batch, xt, xi)?;
                    let h = block(tape, b, text, full, &all, &batch.layout_all)?;
                    let (nt, hi) = split(tape, batch, h)?;
                    let ni = match hi {
                        Some(hi) => {
                            let gate = vision.expect("resolved with image params");
                            let g = block(tape, b, gate, full, &batch.image_rows, &batch.layout_image)?;
                            let gamma = ids.gamma.as_ref().expect("resolved with image params")[l];
                            let g = tape.scale_by(g, b.get(gamma))?;
                            Some(tape.add(hi, g)?)
                        }
                        None => None,
                    };
                    (nt, ni)
                }
                (TowerVariant::DualProjection, _) => {
                    let vision = vision.expect("resolved with image params");
                    dual_projection(tape, b, batch, text, vision, xt, xi.expect("image rows present"))?
                }
            };
            xt = nt;
            xi = ni;
            if let Some(x) = xi {
                vision_hidden.push(x);
            }
        }
        Ok((xt, xi, vision_hidden))
    }

    #[allow(clippy::too_many_arguments)]
    fn xfuse_layer(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        batch: &Batch<T>,
        l: usize,
        xt: Var,
        xi: Option<Var>,
        all: &Rc<[usize]>,
    ) -> Result<(Var, Option<Var>)> {
        let ids = &self.ids;
        let xf = ids
            .xfuse
            .as_ref()
            .map(|x| x[l])
            .ok_or_else(|| Error::config("x_fuse enabled but its weights are absent"))?;
        let text = &ids.text_blocks[l];
        let vision = &ids.vision_blocks.as_ref().expect("resolved with image params")[l];
        let to_text = |tape: &mut Tape<T>, x: Var| match xf.proj_v2t {
            Some(p) => tape.matmul(x, b.get(p)),
            None => Ok(x),
        };
        let to_vision = |tape: &mut Tape<T>, x: Var| match xf.proj_t2v {
            Some(p) => tape.matmul(x, b.get(p)),
            None => Ok(x),
        };
        let xi_t = match xi {
            Some(x) => Some(to_text(tape, x)?),
            None => None,
        };
        let xt_v = to_vision(tape, xt)?;
        let full_t = join(tape, batch, xt, xi_t)?;
        let full_v = join(tape, batch, xt_v, xi)?;
        let h_txt = block(tape, b, text, full_t, all, &batch.layout_all)?;
        let h_img = block(tape, b, vision, full_v, all, &batch.layout_all)?;
        let (tt, ti) = split(tape, batch, h_txt)?;
        let (vt, vi) = split(tape, batch, h_img)?;
        let vt = to_text(tape, vt)?;
        let a = tape.scale_by(tt, b.get(xf.alpha))?;
        let c = tape.scale_by(vt, b.get(xf.beta))?;
        let nt = tape.add(a, c)?;
        let ni = match (vi, ti) {
            (Some(vi), Some(ti)) => {
                let ti = to_vision(tape, ti)?;
                let a = tape.scale_by(vi, b.get(xf.alpha_img))?;
                let c = tape.scale_by(ti, b.get(xf.beta_img))?;
                Some(tape.add(a, c)?)
            }
            _ => None,
        };
        Ok((nt, ni))
    }
}

/// Text and image rows in packed order.
fn join<T: Real>(tape: &mut Tape<T>, batch: &Batch<T>, xt: Var, xi: Option<Var>) -> Result<Var> {
    match xi {
        Some(xi) => tape.interleave(xt, &batch.text_rows, xi, &batch.image_rows),
        None => Ok(xt),
    }
}

fn split<T: Real>(tape: &mut Tape<T>, batch: &Batch<T>, h: Var) -> Result<(Var, Option<Var>)> {
    if batch.n_image() == 0 {
        return Ok((h, None));
    }
    let t = tape.gather_rows(h, &batch.text_rows)?;
    let i = tape.gather_rows(h, &batch.image_rows)?;
    Ok((t, Some(i)))
}

/// Pre-norm transformer block evaluated at the rows `q_rows` of `x_all`, with keys and
/// values from every row.
fn block<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    w: &BlockIds,
    x_all: Var,
    q_rows: &Rc<[usize]>,
    layout: &Rc<AttentionLayout>,
) -> Result<Var> {
    let n = tape.rmsnorm(x_all, b.get(w.attn_norm))?;
    let nq = tape.gather_rows(n, q_rows)?;
    let q = tape.matmul(nq, b.get(w.wq))?;
    let k = tape.matmul(n, b.get(w.wk))?;
    let v = tape.matmul(n, b.get(w.wv))?;
    let a = tape.attention(q, k, v, layout)?;
    let o = tape.matmul(a, b.get(w.wo))?;
    let xq = tape.gather_rows(x_all, q_rows)?;
    let h = tape.add(xq, o)?;
    mlp(tape, b, w, h)
}

fn mlp<T: Real>(tape: &mut Tape<T>, b: &Bound, w: &BlockIds, h: Var) -> Result<Var> {
    let m = tape.rmsnorm(h, b.get(w.mlp_norm))?;
    let g = tape.matmul(m, b.get(w.w_gate))?;
    let u = tape.matmul(m, b.get(w.w_up))?;
    let s = tape.swiglu(g, u)?;
    let d = tape.matmul(s, b.get(w.w_down))?;
    tape.add(h, d)
}

/// Per-modality Q/K/V, output projection and MLP around one joint attention.
#[allow(clippy::too_many_arguments)]
fn dual_projection<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    batch: &Batch<T>,
    text: &BlockIds,
    vision: &BlockIds,
    xt: Var,
    xi: Var,
) -> Result<(Var, Option<Var>)> {
    let nt = tape.rmsnorm(xt, b.get(text.attn_norm))?;
    let ni = tape.rmsnorm(xi, b.get(vision.attn_norm))?;
    let proj = |tape: &mut Tape<T>, wt, wv| -> Result<Var> {
        let a = tape.matmul(nt, b.get(wt))?;
        let c = tape.matmul(ni, b.get(wv))?;
        tape.interleave(a, &batch.text_rows, c, &batch.image_rows)
    };
    let q = proj(tape, text.wq, vision.wq)?;
    let k = proj(tape, text.wk, vision.wk)?;
    let v = proj(tape, text.wv, vision.wv)?;
    let a = tape.attention(q, k, v, &batch.layout_all)?;
    let at = tape.gather_rows(a, &batch.text_rows)?;
    let ai = tape.gather_rows(a, &batch.image_rows)?;
    let ot = tape.matmul(at, b.get(text.wo))?;
    let oi = tape.matmul(ai, b.get(vision.wo))?;
    let ht = tape.add(xt, ot)?;
    let hi = tape.add(xi, oi)?;
    Ok((mlp(tape, b, text, ht)?, Some(mlp(tape, b, vision, hi)?)))
}
