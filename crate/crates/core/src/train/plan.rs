use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::flow::NoisePolicy;
use crate::optim::AdamWConfig;
use crate::synth::MixRatio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Language-model pretraining on text-only documents.
    TextPretrain,
    /// Image modality added on top of the frozen text stack.
    Multimodal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TextPretrain => "text-pretrain",
            Stage::Multimodal => "multimodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub stage: Stage,
    pub loss: LossWeights,
    pub alignment: bool,
    pub noise: NoisePolicy,
    pub mix: MixRatio,
    /// Sequences per step.
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stage: Stage::Multimodal,
            loss: LossWeights::default(),
            alignment: false,
            noise: NoisePolicy::default(),
            mix: MixRatio::default(),
            batch_size: 32,
            steps: 3000,
            eval_every: 250,
            optim: AdamWConfig {
                peak_lr: 2e-3,
                warmup_steps: 100,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn text_pretrain() -> Self {
        Self {
            stage: Stage::TextPretrain,
            steps: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be positive"));
        }
        let w = self.loss;
        if [w.ar, w.dm, w.align].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.optim.peak_lr > 0.0 && self.optim.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        self.noise.validate()?;
        match self.stage {
            Stage::Multimodal => self.mix.validate(),
            Stage::TextPretrain if self.alignment => Err(Error::config("alignment needs the multimodal stage")),
            Stage::TextPretrain => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let p = TrainPlan::default();
        p.validate().unwrap();
        assert_eq!((p.loss.ar, p.loss.dm), (0.2, 1.0));
        assert_eq!((p.optim.beta1, p.optim.beta2), (0.9, 0.95));
        TrainPlan::text_pretrain().validate().unwrap();
    }

    #[test]
    fn rejects_bad_plans() {
        let bad = [
            TrainPlan { batch_size: 0, ..Default::default() },
            TrainPlan { mix: MixRatio { t2i: 0.0, i2t: 0.0 }, ..Default::default() },
            TrainPlan { noise: NoisePolicy { t_max_i2t: 2.0 }, ..Default::default() },
            TrainPlan { alignment: true, ..TrainPlan::text_pretrain() },
        ];
        for p in bad {
            assert!(matches!(p.validate(), Err(Error::Config(_))));
        }
    }
}
