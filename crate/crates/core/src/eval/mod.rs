//! Oracle-scored evaluation: language preservation, captioning, generation, linear probes.

mod caption;
mod generate;
mod oracle;
mod probe;

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use caption::{captioning_prefix, eval_caption, CaptionEval, NextToken, MAX_CAPTION_TOKENS};
pub use generate::{eval_generation, generation_prompt, GenerationEval};
pub use oracle::OracleClassifier;
pub use probe::{fit_softmax, linear_probe, probe_features, Attribute, ProbeConfig, ProbeHead, ProbeMode, ProbeResult};

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::model::{count_flops, Batch, Model};
use crate::real::Real;
use crate::synth::{assemble, MultimodalSequence, SampleKind, SampleStream, SceneSpec, Vocabulary};

/// Chance level of exact-match captioning or generation over the 48 scenes.
pub const SCENE_CHANCE: f64 = 1.0 / 48.0;

/// Every text-only document of the world: 48 scenes × 2 sentence orders.
pub fn text_probe_set() -> Vec<MultimodalSequence> {
    let v = Vocabulary::new();
    SceneSpec::all()
        .iter()
        .flat_map(|s| [false, true].map(|variant| assemble(&v, SampleKind::TextOnly, s, variant)))
        .collect()
}

/// Largest absolute logit difference between `model` and `base` over the probe documents.
pub fn eval_text_preservation<T: Real>(model: &Model<T>, base: &Model<T>, probes: &[MultimodalSequence]) -> Result<f64> {
    if probes.iter().any(|s| s.kind != SampleKind::TextOnly) {
        return Err(Error::contract("text preservation probes must be text-only"));
    }
    let mut worst = 0.0f64;
    for chunk in probes.chunks(32) {
        let a = model.infer(&Batch::new(chunk, model.config())?)?.logits;
        let b = base.infer(&Batch::new(chunk, base.config())?)?.logits;
        if a.shape() != b.shape() {
            return Err(Error::dim("eval_text_preservation", a.shape(), b.shape()));
        }
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(worst)
}

/// Fresh text-only documents from a stream independent of any training stream.
pub fn held_out_text(seed: u64, n: usize) -> Vec<MultimodalSequence> {
    let v = Vocabulary::new();
    let stream = SampleStream::text_only(seed ^ 0x7e57_0000_0000_0001);
    (0..n as u64)
        .map(|i| {
            let d = stream.draw(i);
            assemble(&v, SampleKind::TextOnly, &d.scene, d.variant)
        })
        .collect()
}

/// `exp` of the mean next-token negative log-likelihood over the documents.
pub fn text_perplexity<T: Real>(model: &Model<T>, docs: &[MultimodalSequence]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in docs.chunks(32) {
        let batch = Batch::new(chunk, model.config())?;
        let logits = model.infer(&batch)?.logits;
        let v = logits.cols();
        for (i, seq) in chunk.iter().enumerate() {
            for (pos, tok) in seq.ar_targets() {
                let row = logits.row(batch.text_row_of[i][pos]);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.as_f64()));
                let lse = m + Float::ln(row.iter().map(|x| Float::exp(x.as_f64() - m)).sum::<f64>());
                nll += lse - row[tok.index().min(v - 1)].as_f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("no supervised text positions"));
    }
    Ok(Float::exp(nll / count as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub captioning: bool,
    pub generation: bool,
    /// Probe layers (0 = embedding); empty disables probing.
    pub probe_layers: Vec<usize>,
    pub probe: ProbeConfig,
    pub text_docs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            captioning: true,
            generation: true,
            probe_layers: Vec::new(),
            probe: ProbeConfig::default(),
            text_docs: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    /// Max |logit − base logit| on the text probe set, when a base is given.
    pub text_divergence: Option<f64>,
    pub text_perplexity: f64,
    pub caption_accuracy: Option<f64>,
    pub generation_accuracy: Option<f64>,
    pub probes: Vec<ProbeResult>,
    /// Attention score MACs of one caption-plus-image sequence under this configuration.
    pub score_macs: u64,
}

/// Runs every enabled evaluation on held-out scenes.
pub fn evaluate<T: Real>(model: &Model<T>, base: Option<&Model<T>>, cfg: &EvalConfig, step: u64) -> Result<EvalReport> {
    let held_out = SceneSpec::held_out_split();
    let text_divergence = match base {
        Some(b) => Some(eval_text_preservation(model, b, &text_probe_set())?),
        None => None,
    };
    let text_perplexity = text_perplexity(model, &held_out_text(cfg.seed, cfg.text_docs))?;
    let multimodal = model.is_multimodal();
    let caption_accuracy = match cfg.captioning && multimodal {
        true => Some(eval_caption(model, &held_out)?.accuracy),
        false => None,
    };
    let generation_accuracy = match cfg.generation && multimodal {
        true => Some(eval_generation(model, &held_out, &cfg.sampler, cfg.seed)?.accuracy),
        false => None,
    };
    let mut probes = Vec::new();
    if multimodal {
        for &layer in &cfg.probe_layers {
            for mode in [ProbeMode::Understanding, ProbeMode::Generation] {
                probes.push(linear_probe(model, layer, mode, Attribute::Shape, &cfg.probe)?);
            }
        }
    }
    let score_macs = count_flops(model.config(), 10, 64).score_macs();
    Ok(EvalReport {
        step,
        text_divergence,
        text_perplexity,
        caption_accuracy,
        generation_accuracy,
        probes,
        score_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            vision_dim: 8,
            heads: 2,
            mlp_hidden: 16,
            align_layer: 1,
            ..Default::default()
        }
    }

    #[test]
    fn probe_set_is_every_document() {
        let p = text_probe_set();
        assert_eq!(p.len(), 96);
        assert!(p.iter().all(|s| s.kind == SampleKind::TextOnly));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut m = Model::<f64>::text_only(tiny(), 0).unwrap();
        let id = m.params().id("text.head").unwrap();
        m.params_mut().get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let ppl = text_perplexity(&m, &held_out_text(0, 5)).unwrap();
        assert!((ppl - 23.0).abs() < 1e-9);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let base = Model::<f32>::text_only(tiny(), 0).unwrap();
        let m = Model::multimodal(tiny(), base.params(), 1).unwrap();
        let cfg = EvalConfig {
            sampler: SamplerConfig { steps: 4, guidance: 5.5 },
            ..Default::default()
        };
        let r = evaluate(&m, Some(&base), &cfg, 0).unwrap();
        assert_eq!(r.text_divergence, Some(0.0));
        assert!(r.caption_accuracy.unwrap() <= 0.05 + 1e-12);
        assert!(r.generation_accuracy.unwrap() <= 0.25);
    }
}
