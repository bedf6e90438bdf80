use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;

use super::config::ModelConfig;
use crate::autodiff::{AttentionLayout, AttnSegment};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::synth::{Modality, MultimodalSequence, Slot, N_PATCHES};
use crate::tensor::Tensor;

/// Sinusoidal features of a diffusion time, on the 0..1000 scale.
pub fn timestep_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = vec![0.0; n];
    for i in 0..half {
        let freq = Float::exp(-Float::ln(10_000.0f64) * i as f64 / half as f64);
        let arg = 1000.0 * t * freq;
        out[i] = Float::sin(arg);
        out[half + i] = Float::cos(arg);
    }
    out
}

/// Several sequences packed into one row space: text rows and image rows are kept as two
/// matrices whose rows map into the packed order.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub rows: usize,
    pub text_rows: Rc<[usize]>,
    pub image_rows: Rc<[usize]>,
    pub token_ids: Vec<usize>,
    /// Learned-position index of each text row: its rank among its sequence's text positions.
    pub text_pos: Vec<usize>,
    /// Model inputs at image rows, `[n_image, patch_dim]`.
    pub patches: Tensor<T>,
    pub patch_pos: Vec<usize>,
    pub time_features: Tensor<T>,
    pub layout_all: Rc<AttentionLayout>,
    pub layout_text: Rc<AttentionLayout>,
    pub layout_image: Rc<AttentionLayout>,
    /// Per sequence: position → text-row index (`usize::MAX` at image positions).
    pub text_row_of: Vec<Vec<usize>>,
    /// Per sequence: its range of image rows.
    pub image_range: Vec<Option<Range<usize>>>,
}

impl<T: Real> Batch<T> {
    pub fn new(seqs: &[MultimodalSequence], cfg: &ModelConfig) -> Result<Self> {
        Self::build(seqs, cfg, false)
    }

    /// Same packing, but image rows receive the clean latent at t = 0.
    pub fn clean_view(seqs: &[MultimodalSequence], cfg: &ModelConfig) -> Result<Self> {
        Self::build(seqs, cfg, true)
    }

    fn build(seqs: &[MultimodalSequence], cfg: &ModelConfig, clean: bool) -> Result<Self> {
        let mut text_rows = Vec::new();
        let mut image_rows = Vec::new();
        let mut token_ids = Vec::new();
        let mut text_pos = Vec::new();
        let mut patches = Vec::new();
        let mut patch_pos = Vec::new();
        let mut time_features = Vec::new();
        let mut seg_all = Vec::new();
        let mut seg_text = Vec::new();
        let mut seg_image = Vec::new();
        let mut text_row_of = Vec::with_capacity(seqs.len());
        let mut image_range = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for seq in seqs {
            let len = seq.len();
            if len > cfg.max_seq_len {
                return Err(Error::config(alloc::format!(
                    "sequence of length {len} exceeds max_seq_len {}",
                    cfg.max_seq_len
                )));
            }
            let bidi = seq.span.map(|s| (s.start, s.eoi));
            let (q_text, q_image) = (text_rows.len(), image_rows.len());
            let mut local_text = Vec::new();
            let mut local_image = Vec::new();
            let mut map = vec![usize::MAX; len];
            let img_start = image_rows.len();
            let t = if clean { 0.0 } else { seq.t };
            let feats = timestep_features(t, cfg.time_features);
            let src = if clean { seq.clean.as_ref() } else { seq.input.as_ref() };
            for (pos, slot) in seq.slots.iter().enumerate() {
                match *slot {
                    Slot::Text(tok) => {
                        if tok.index() >= cfg.vocab_size {
                            return Err(Error::contract("token id outside the vocabulary"));
                        }
                        map[pos] = text_rows.len();
                        text_pos.push(local_text.len());
                        local_text.push(pos);
                        text_rows.push(offset + pos);
                        token_ids.push(tok.index());
                    }
                    Slot::Image(k) => {
                        let src = src.ok_or_else(|| Error::contract("image position without a latent"))?;
                        if k >= N_PATCHES || src.cols() != cfg.patch_dim {
                            return Err(Error::dim("batch", src.shape(), &[k, cfg.patch_dim]));
                        }
                        local_image.push(pos);
                        image_rows.push(offset + pos);
                        patches.extend(src.row(k).iter().map(|&v| T::c(v as f64)));
                        patch_pos.push(k);
                        time_features.extend(feats.iter().map(|&f| T::c(f)));
                    }
                }
            }
            debug_assert!(local_text.iter().all(|&p| seq.modality(p) == Modality::Text));
            image_range.push((image_rows.len() > img_start).then_some(img_start..image_rows.len()));
            text_row_of.push(map);
            let seg = |q_offset, q_positions| AttnSegment {
                kv_offset: offset,
                kv_len: len,
                q_offset,
                q_positions,
                bidirectional: bidi,
            };
            seg_all.push(seg(offset, (0..len).collect()));
            seg_text.push(seg(q_text, local_text));
            seg_image.push(seg(q_image, local_image));
            offset += len;
        }
        let n_img = image_rows.len();
        let layout = |segments| Rc::new(AttentionLayout { heads: cfg.heads, segments });
        Ok(Self {
            rows: offset,
            text_rows: text_rows.into(),
            image_rows: image_rows.into(),
            token_ids,
            text_pos,
            patches: Tensor::new(&[n_img, cfg.patch_dim], patches)?,
            patch_pos,
            time_features: Tensor::new(&[n_img, cfg.time_features], time_features)?,
            layout_all: layout(seg_all),
            layout_text: layout(seg_text),
            layout_image: layout(seg_image),
            text_row_of,
            image_range,
        })
    }

    pub fn n_text(&self) -> usize {
        self.text_rows.len()
    }

    pub fn n_image(&self) -> usize {
        self.image_rows.len()
    }

    /// Every packed row in order.
    pub fn all_rows(&self) -> Rc<[usize]> {
        (0..self.rows).collect()
    }
}
