use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::caption::fraction;
use super::oracle::OracleClassifier;
use crate::error::{Error, Result};
use crate::flow::{sample_images, SamplerConfig, VelocityField};
use crate::model::{Batch, Model};
use crate::real::Real;
use crate::rng::RngStream;
use crate::synth::{
    ImageLatent, ImageSpan, MultimodalSequence, SampleKind, SceneSpec, Slot, TokenId, Vocabulary, N_PATCHES,
};
use crate::tensor::Tensor;

/// Length of the unconditional caption, matching the grammar's captions.
const NULL_CAPTION: usize = 6;

/// `[BOS, caption, BOI, image, EOI, EOS]` holding latent `x` at time `t`. `None` builds the
/// caption-dropped layout used for the unconditional branch. The scene field is nominal.
pub fn generation_prompt(caption: Option<&[TokenId]>, x: Tensor<f32>, t: f64) -> MultimodalSequence {
    let mut slots = Vec::with_capacity(N_PATCHES + 12);
    slots.push(Slot::Text(TokenId::BOS));
    match caption {
        Some(c) => slots.extend(c.iter().map(|&t| Slot::Text(t))),
        None => slots.extend((0..NULL_CAPTION).map(|_| Slot::Text(TokenId::NULL))),
    }
    let boi = slots.len();
    slots.push(Slot::Text(TokenId::BOI));
    slots.extend((0..N_PATCHES).map(Slot::Image));
    slots.push(Slot::Text(TokenId::EOI));
    slots.push(Slot::Text(TokenId::EOS));
    MultimodalSequence {
        kind: SampleKind::T2I,
        scene: SceneSpec::from_index(0).expect("scene 0 exists"),
        slots,
        span: Some(ImageSpan {
            boi,
            start: boi + 1,
            eoi: boi + 1 + N_PATCHES,
        }),
        t,
        clean: None,
        input: Some(x),
        caption_dropped: caption.is_none(),
    }
}

impl<T: Real> VelocityField for Model<T> {
    fn velocities(&self, xs: &[Tensor<f32>], t: f64, captions: &[Option<&[TokenId]>]) -> Result<Vec<Tensor<f32>>> {
        if xs.len() != captions.len() {
            return Err(Error::dim("velocities", &[xs.len()], &[captions.len()]));
        }
        let seqs: Vec<MultimodalSequence> = xs
            .iter()
            .zip(captions)
            .map(|(x, c)| generation_prompt(*c, x.clone(), t))
            .collect();
        let batch = Batch::new(&seqs, self.config())?;
        let v = self
            .infer(&batch)?
            .velocity
            .ok_or_else(|| Error::config("text-only model has no velocity head"))?;
        let cols = v.cols();
        (0..seqs.len())
            .map(|i| {
                let r = batch.image_range[i].clone().expect("prompt has an image");
                let data = v.data()[r.start * cols..r.end * cols].iter().map(|x| x.as_f64() as f32).collect();
                Tensor::new(&[N_PATCHES, cols], data)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub accuracy: f64,
    pub predicted: Vec<Option<SceneSpec>>,
    #[serde(skip)]
    pub images: Vec<ImageLatent>,
}

/// Samples one image per prompt scene and scores it with the oracle classifier.
pub fn eval_generation(
    field: &dyn VelocityField,
    scenes: &[SceneSpec],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<GenerationEval> {
    let vocab = Vocabulary::new();
    let captions: Vec<Vec<TokenId>> = scenes.iter().map(|s| vocab.caption_of(s)).collect();
    let images = sample_images(field, &captions, sampler, &RngStream::new(seed).split("generation"))?;
    let predicted: Vec<Option<SceneSpec>> = images.iter().map(|im| OracleClassifier.classify(im)).collect();
    let correct: Vec<bool> = predicted.iter().zip(scenes).map(|(p, s)| *p == Some(*s)).collect();
    Ok(GenerationEval {
        accuracy: fraction(&correct),
        predicted,
        images,
    })
}
