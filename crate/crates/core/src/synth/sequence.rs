use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::patch::patchify;
use super::scene::{render_scene, SceneSpec};
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SEQ_LEN: usize = 80;
pub const PATCH: usize = 2;
pub const N_PATCHES: usize = 64;
pub const PATCH_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    #[serde(rename = "t2i")]
    T2I,
    #[serde(rename = "i2t")]
    I2T,
    #[serde(rename = "text-only")]
    TextOnly,
}

impl SampleKind {
    pub fn name(self) -> &'static str {
        match self {
            SampleKind::T2I => "t2i",
            SampleKind::I2T => "i2t",
            SampleKind::TextOnly => "text-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SampleKind::T2I, SampleKind::I2T, SampleKind::TextOnly]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Contents of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text(TokenId),
    /// Index of the patch within the image span.
    Image(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Positions of the image span: `boi` marker, first patch, and the `eoi` marker right after
/// the last patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpan {
    pub boi: usize,
    pub start: usize,
    pub eoi: usize,
}

impl ImageSpan {
    pub fn patches(&self) -> core::ops::Range<usize> {
        self.start..self.eoi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub kind: SampleKind,
    pub scene: SceneSpec,
    pub slots: Vec<Slot>,
    pub span: Option<ImageSpan>,
    /// Diffusion time of the image span; 0 is clean.
    pub t: f64,
    /// Clean patch vectors `[64, 12]`.
    pub clean: Option<Tensor<f32>>,
    /// Patch vectors the model sees (the noised latent when `t > 0`).
    pub input: Option<Tensor<f32>>,
    /// Caption tokens replaced by NULL for unconditional training.
    pub caption_dropped: bool,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn modality(&self, pos: usize) -> Modality {
        match self.slots[pos] {
            Slot::Text(_) => Modality::Text,
            Slot::Image(_) => Modality::Image,
        }
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.modality(i) == Modality::Text)
            .collect()
    }

    pub fn image_positions(&self) -> Vec<usize> {
        self.span.map(|s| s.patches().collect()).unwrap_or_default()
    }

    /// Token ids at text positions, in order.
    pub fn text_tokens(&self) -> Vec<TokenId> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Text(t) => Some(*t),
                Slot::Image(_) => None,
            })
            .collect()
    }

    /// Caption positions (T2I and I2T).
    pub fn caption_range(&self) -> Option<core::ops::Range<usize>> {
        let span = self.span?;
        match self.kind {
            SampleKind::T2I => Some(1..span.boi),
            SampleKind::I2T => Some(span.eoi + 1..self.len() - 1),
            SampleKind::TextOnly => None,
        }
    }

    /// Next-token supervision as (input position, target token) pairs over adjacent text
    /// positions. I2T supervises only the caption and EOS after the image; a T2I sample whose
    /// caption was dropped carries none.
    pub fn ar_targets(&self) -> Vec<(usize, TokenId)> {
        let start = match (self.kind, self.span) {
            (SampleKind::T2I, _) if self.caption_dropped => return Vec::new(),
            (SampleKind::I2T, Some(span)) => span.eoi,
            _ => 0,
        };
        let mut out = Vec::new();
        for i in start..self.len().saturating_sub(1) {
            if let (Slot::Text(_), Slot::Text(next)) = (self.slots[i], self.slots[i + 1]) {
                out.push((i, next));
            }
        }
        out
    }

    /// Replaces the caption tokens with NULL, keeping the layout.
    pub fn drop_caption(&mut self) {
        if let Some(range) = self.caption_range() {
            for i in range {
                self.slots[i] = Slot::Text(TokenId::NULL);
            }
            self.caption_dropped = true;
        }
    }

    /// Installs a noised view of the image span at time `t`.
    pub fn set_noised(&mut self, t: f64, noised: Tensor<f32>) -> Result<()> {
        if self.span.is_none() {
            return Err(Error::contract("text-only sequence has no image span"));
        }
        if noised.shape() != [N_PATCHES, PATCH_DIM] {
            return Err(Error::dim("set_noised", noised.shape(), &[N_PATCHES, PATCH_DIM]));
        }
        self.t = t;
        self.input = Some(noised);
        Ok(())
    }

    /// Checks every structural invariant of the layout.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("{} sequence: {m}", self.kind.name())));
        if self.is_empty() || self.len() > MAX_SEQ_LEN {
            return bad("length outside 1..=80");
        }
        if self.slots[0] != Slot::Text(TokenId::BOS) || self.slots[self.len() - 1] != Slot::Text(TokenId::EOS) {
            return bad("must start with BOS and end with EOS");
        }
        if !(0.0..=1.0).contains(&self.t) {
            return bad("timestep outside [0, 1]");
        }
        let n_img = self.slots.iter().filter(|s| matches!(s, Slot::Image(_))).count();
        if self.slots.contains(&Slot::Text(TokenId::PAD)) {
            return bad("PAD inside the sequence");
        }
        let Some(span) = self.span else {
            if self.kind != SampleKind::TextOnly {
                return bad("missing image span");
            }
            if n_img > 0 || self.clean.is_some() || self.input.is_some() || self.t != 0.0 {
                return bad("text-only sequence carries image state");
            }
            return Ok(());
        };
        if self.kind == SampleKind::TextOnly {
            return bad("text-only sequence has an image span");
        }
        if span.start != span.boi + 1 || span.eoi != span.start + N_PATCHES || n_img != N_PATCHES {
            return bad("image span is not 64 contiguous positions");
        }
        if self.slots[span.boi] != Slot::Text(TokenId::BOI) || self.slots.get(span.eoi) != Some(&Slot::Text(TokenId::EOI)) {
            return bad("image span not bracketed by BOI/EOI");
        }
        for (k, i) in span.patches().enumerate() {
            if self.slots[i] != Slot::Image(k) {
                return bad("image positions out of order");
            }
        }
        let boi_count = self.slots.iter().filter(|s| **s == Slot::Text(TokenId::BOI)).count();
        let eoi_count = self.slots.iter().filter(|s| **s == Slot::Text(TokenId::EOI)).count();
        if boi_count != 1 || eoi_count != 1 {
            return bad("more than one image marker");
        }
        match self.kind {
            SampleKind::T2I if span.boi < 2 => return bad("caption must precede the image"),
            SampleKind::I2T if span.boi != 1 || span.eoi + 2 > self.len() - 1 => {
                return bad("image must precede the caption")
            }
            _ => {}
        }
        for latent in [&self.clean, &self.input] {
            match latent {
                Some(l) if l.shape() == [N_PATCHES, PATCH_DIM] => {}
                _ => return bad("image latent missing or misshapen"),
            }
        }
        Ok(())
    }

    /// Additionally enforces that I2T images are clean when the noise limit is zero.
    pub fn validate_with_noise_limit(&self, t_max: f64) -> Result<()> {
        self.validate()?;
        if self.kind == SampleKind::I2T && t_max == 0.0 && self.t != 0.0 {
            return Err(Error::contract("i2t sequence noised under a zero noise limit"));
        }
        Ok(())
    }
}

/// Builds the clean (t = 0) sequence of `kind` for `spec`. `variant` selects the sentence
/// order of text-only documents and is ignored otherwise.
pub fn assemble(vocab: &Vocabulary, kind: SampleKind, spec: &SceneSpec, variant: bool) -> MultimodalSequence {
    let mut slots = Vec::with_capacity(MAX_SEQ_LEN);
    slots.push(Slot::Text(TokenId::BOS));
    let text = |ids: Vec<TokenId>| ids.into_iter().map(Slot::Text);
    let mut span = None;
    let mut push_image = |slots: &mut Vec<Slot>| {
        let boi = slots.len();
        slots.push(Slot::Text(TokenId::BOI));
        slots.extend((0..N_PATCHES).map(Slot::Image));
        slots.push(Slot::Text(TokenId::EOI));
        span = Some(ImageSpan {
            boi,
            start: boi + 1,
            eoi: boi + 1 + N_PATCHES,
        });
    };
    match kind {
        SampleKind::T2I => {
            slots.extend(text(vocab.caption_of(spec)));
            push_image(&mut slots);
        }
        SampleKind::I2T => {
            push_image(&mut slots);
            slots.extend(text(vocab.caption_of(spec)));
        }
        SampleKind::TextOnly => slots.extend(text(vocab.text_sentences(spec, variant))),
    }
    slots.push(Slot::Text(TokenId::EOS));
    let clean = span.map(|_| patchify(&render_scene(spec), PATCH).expect("16 divisible by 2"));
    MultimodalSequence {
        kind,
        scene: *spec,
        slots,
        span,
        t: 0.0,
        input: clean.clone(),
        clean,
        caption_dropped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{Color, Quadrant, Shape};

    fn spec() -> SceneSpec {
        SceneSpec::new(Shape::Triangle, Color::Green, Quadrant::TopRight)
    }

    #[test]
    fn layouts() {
        let v = Vocabulary::new();
        let t2i = assemble(&v, SampleKind::T2I, &spec(), false);
        let span = t2i.span.unwrap();
        assert_eq!(t2i.len(), 74);
        assert_eq!(span.boi, 7);
        assert!(t2i.caption_range().unwrap().end <= span.boi);
        let i2t = assemble(&v, SampleKind::I2T, &spec(), false);
        let span = i2t.span.unwrap();
        assert_eq!(span.boi, 1);
        assert!(span.eoi < i2t.caption_range().unwrap().start);
        assert_eq!(t2i.clean, i2t.clean);
        let txt = assemble(&v, SampleKind::TextOnly, &spec(), true);
        assert!(txt.image_positions().is_empty());
        for s in [&t2i, &i2t, &txt] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn ar_targets_per_kind() {
        let v = Vocabulary::new();
        let t2i = assemble(&v, SampleKind::T2I, &spec(), false);
        // BOS→a … caption→BOI, then EOI→EOS
        assert_eq!(t2i.ar_targets().len(), 7 + 1);
        let i2t = assemble(&v, SampleKind::I2T, &spec(), false);
        let tg = i2t.ar_targets();
        assert_eq!(tg.len(), 7);
        assert_eq!(tg[0].0, i2t.span.unwrap().eoi);
        assert_eq!(tg.last().unwrap().1, TokenId::EOS);
        let txt = assemble(&v, SampleKind::TextOnly, &spec(), false);
        assert_eq!(txt.ar_targets().len(), txt.len() - 1);
        let mut dropped = t2i.clone();
        dropped.drop_caption();
        assert!(dropped.ar_targets().is_empty());
        dropped.validate().unwrap();
    }

    #[test]
    fn validator_rejects_broken_layouts() {
        let v = Vocabulary::new();
        let good = assemble(&v, SampleKind::T2I, &spec(), false);
        let mut s = good.clone();
        s.slots.swap(10, 11);
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.t = 1.5;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.kind = SampleKind::TextOnly;
        assert!(s.validate().is_err());
        let mut s = assemble(&v, SampleKind::I2T, &spec(), false);
        s.t = 0.3;
        assert!(s.validate().is_ok());
        assert!(s.validate_with_noise_limit(0.0).is_err());
    }
}
