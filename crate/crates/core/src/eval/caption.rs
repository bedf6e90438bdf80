use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Batch, Model};
use crate::real::Real;
use crate::synth::{assemble, MultimodalSequence, SampleKind, SceneSpec, Slot, TokenId, Vocabulary};

/// New tokens allowed after the image before decoding gives up.
pub const MAX_CAPTION_TOKENS: usize = 10;

/// Greedy next-token prediction after the last position of each sequence.
pub trait NextToken {
    fn next_tokens(&self, seqs: &[MultimodalSequence]) -> Result<Vec<TokenId>>;
}

impl<T: Real> NextToken for Model<T> {
    fn next_tokens(&self, seqs: &[MultimodalSequence]) -> Result<Vec<TokenId>> {
        let batch = Batch::new(seqs, self.config())?;
        let out = self.infer(&batch)?;
        let v = out.logits.cols();
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let row = out.logits.row(batch.text_row_of[i][s.len() - 1]);
                let best = (0..v).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                TokenId(best as u32)
            })
            .collect())
    }
}

/// `[BOS, BOI, image, EOI]` of the clean rendering of `spec`.
pub fn captioning_prefix(vocab: &Vocabulary, spec: &SceneSpec) -> MultimodalSequence {
    let mut seq = assemble(vocab, SampleKind::I2T, spec, false);
    let eoi = seq.span.expect("i2t has an image").eoi;
    seq.slots.truncate(eoi + 1);
    seq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub accuracy: f64,
    /// Generated tokens per scene, without the closing EOS.
    pub captions: Vec<Vec<TokenId>>,
    pub correct: Vec<bool>,
}

/// Greedy captioning of clean images; a caption counts when it parses to the scene.
pub fn eval_caption(model: &dyn NextToken, scenes: &[SceneSpec]) -> Result<CaptionEval> {
    let vocab = Vocabulary::new();
    let mut seqs: Vec<MultimodalSequence> = scenes.iter().map(|s| captioning_prefix(&vocab, s)).collect();
    let mut captions = alloc::vec![Vec::new(); scenes.len()];
    let mut open: Vec<usize> = (0..scenes.len()).collect();
    for _ in 0..MAX_CAPTION_TOKENS {
        if open.is_empty() {
            break;
        }
        let active: Vec<MultimodalSequence> = open.iter().map(|&i| seqs[i].clone()).collect();
        let next = model.next_tokens(&active)?;
        let mut still = Vec::new();
        for (&i, tok) in open.iter().zip(next) {
            if tok == TokenId::EOS {
                continue;
            }
            captions[i].push(tok);
            seqs[i].slots.push(Slot::Text(tok));
            still.push(i);
        }
        open = still;
    }
    let correct: Vec<bool> = scenes
        .iter()
        .zip(&captions)
        .map(|(s, c)| vocab.parse_caption(c).map(|p| p == *s).unwrap_or(false))
        .collect();
    let accuracy = fraction(&correct);
    Ok(CaptionEval {
        accuracy,
        captions,
        correct,
    })
}

pub(crate) fn fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64
}
