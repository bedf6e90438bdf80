use alloc::format;
use alloc::vec::Vec;

use super::loss::{loss_align, loss_ar, loss_dm, LossBreakdown};
use super::plan::{Stage, TrainPlan};
use super::teacher::TeacherEncoder;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::{draw_timestep, make_flow_sample, FlowSample, NoisePolicy};
use crate::model::{Batch, Model, ModelConfig};
use crate::optim::OptimizerState;
use crate::real::Real;
use crate::rng::RngStream;
use crate::synth::{assemble, MultimodalSequence, SampleDraw, SampleKind, SampleStream, SceneSpec, Vocabulary};
use crate::tensor::Tensor;

/// An assembled sequence with its diffusion draw.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub seq: MultimodalSequence,
    pub flow: Option<FlowSample>,
    /// Whether the image contributes to the diffusion loss.
    pub diffuse: bool,
}

/// Turns a stream draw into a training sample. All randomness comes from `draw.seed`.
pub fn prepare_sample(
    vocab: &Vocabulary,
    draw: &SampleDraw,
    noise: &NoisePolicy,
    caption_dropout: f64,
) -> Result<TrainingSample> {
    let mut rng = RngStream::new(draw.seed);
    let mut seq = assemble(vocab, draw.kind, &draw.scene, draw.variant);
    if draw.kind == SampleKind::T2I && rng.bernoulli(caption_dropout) {
        seq.drop_caption();
    }
    let Some(clean) = seq.clean.clone() else {
        return Ok(TrainingSample {
            seq,
            flow: None,
            diffuse: false,
        });
    };
    let t = draw_timestep(draw.kind, noise, &mut rng);
    let flow = make_flow_sample(&clean, t, &mut rng)?;
    seq.set_noised(t, flow.xt.clone())?;
    Ok(TrainingSample {
        diffuse: noise.supervises_image(draw.kind, t),
        seq,
        flow: Some(flow),
    })
}

/// The training loop state. Batch `k` is a pure function of the plan seed and `k`, so a
/// run restored from (parameters, optimizer state) continues bit-identically.
pub struct Trainer<T> {
    plan: TrainPlan,
    model: Model<T>,
    opt: OptimizerState<T>,
    stream: SampleStream,
    vocab: Vocabulary,
    teacher_features: Option<Vec<Tensor<T>>>,
    frozen_digest: [u8; 32],
}

impl<T: Real> Trainer<T> {
    pub fn new(plan: TrainPlan, model: Model<T>) -> Result<Self> {
        let opt = OptimizerState::new(plan.optim.clone());
        Self::resume(plan, model, opt)
    }

    pub fn resume(plan: TrainPlan, mut model: Model<T>, opt: OptimizerState<T>) -> Result<Self> {
        plan.validate()?;
        if opt.config != plan.optim {
            return Err(Error::config("optimizer state was created under different settings"));
        }
        let stream = match plan.stage {
            Stage::TextPretrain if model.is_multimodal() => {
                return Err(Error::config("text pretraining expects a text-only model"));
            }
            Stage::TextPretrain => SampleStream::text_only(plan.seed),
            Stage::Multimodal if !model.is_multimodal() => {
                return Err(Error::config(
                    "the multimodal stage needs a model grown from a stage-1 checkpoint",
                ));
            }
            Stage::Multimodal => SampleStream::new(plan.mix, plan.seed)?,
        };
        let teacher_features = if plan.alignment {
            let teacher = TeacherEncoder::train(plan.seed)?;
            model.add_alignment(teacher.dim(), plan.seed)?;
            let feats = SceneSpec::all()
                .iter()
                .map(|s| {
                    let x = crate::synth::patchify(&crate::synth::render_scene(s), crate::synth::PATCH)?;
                    Ok(teacher.features(&x)?.cast())
                })
                .collect::<Result<Vec<_>>>()?;
            Some(feats)
        } else {
            None
        };
        let frozen_digest = model.params().frozen_digest();
        Ok(Self {
            plan,
            model,
            opt,
            stream,
            vocab: Vocabulary::new(),
            teacher_features,
            frozen_digest,
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.opt
    }

    pub fn into_parts(self) -> (Model<T>, OptimizerState<T>) {
        (self.model, self.opt)
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.plan.steps
    }

    /// The samples of step `k` (0-based).
    pub fn samples_at(&self, k: u64) -> Result<Vec<TrainingSample>> {
        let b = self.plan.batch_size as u64;
        (k * b..(k + 1) * b)
            .map(|i| {
                prepare_sample(
                    &self.vocab,
                    &self.stream.draw(i),
                    &self.plan.noise,
                    self.model.config().caption_dropout,
                )
            })
            .collect()
    }

    /// Losses of `samples` recorded on `tape`, returning the breakdown and the weighted
    /// total to differentiate (absent when no component is present).
    pub fn losses(
        &self,
        tape: &mut Tape<T>,
        samples: &[TrainingSample],
    ) -> Result<(LossBreakdown, Option<crate::autodiff::Var>)> {
        let cfg = self.model.config();
        let seqs: Vec<MultimodalSequence> = samples.iter().map(|s| s.seq.clone()).collect();
        let batch = Batch::new(&seqs, cfg)?;
        let bound = tape.bind(self.model.params());
        let out = self.model.forward(tape, &bound, &batch)?;
        let ar = loss_ar(tape, out.logits, &batch, &seqs)?;
        let targets: Vec<Option<&[f32]>> = samples
            .iter()
            .map(|s| match (&s.flow, s.diffuse) {
                (Some(f), true) => Some(f.v_target.data()),
                _ => None,
            })
            .collect();
        let dm = loss_dm(tape, out.velocity, &batch, &targets)?;
        let align = match &self.teacher_features {
            Some(feats) => self.align_term(tape, &bound, cfg, &seqs, feats)?,
            None => None,
        };
        let w = self.plan.loss;
        let value = |tape: &Tape<T>, v: Option<crate::autodiff::Var>| v.map(|v| tape.scalar(v).as_f64());
        let breakdown = LossBreakdown::new(w, value(tape, ar), value(tape, dm), value(tape, align));
        let terms: Vec<_> = [(ar, w.ar), (dm, w.dm), (align, w.align)]
            .into_iter()
            .filter_map(|(v, c)| v.map(|v| (v, T::c(c))))
            .collect();
        let total = if terms.is_empty() {
            None
        } else {
            Some(tape.weighted_sum(&terms)?)
        };
        Ok((breakdown, total))
    }

    fn align_term(
        &self,
        tape: &mut Tape<T>,
        bound: &crate::autodiff::Bound,
        cfg: &ModelConfig,
        seqs: &[MultimodalSequence],
        feats: &[Tensor<T>],
    ) -> Result<Option<crate::autodiff::Var>> {
        let with_image: Vec<MultimodalSequence> = seqs.iter().filter(|s| s.span.is_some()).cloned().collect();
        if with_image.is_empty() {
            return Ok(None);
        }
        let clean = Batch::clean_view(&with_image, cfg)?;
        let h = self.model.vision_features(tape, bound, &clean, cfg.align_layer)?;
        let mut target = Vec::with_capacity(clean.n_image() * feats[0].cols());
        for s in &with_image {
            target.extend_from_slice(feats[s.scene.index()].data());
        }
        let target = tape.constant(Tensor::new(&[clean.n_image(), feats[0].cols()], target)?);
        let w = self
            .model
            .align_var(bound)
            .ok_or_else(|| Error::config("alignment enabled without a projection"))?;
        loss_align(tape, h, w, target).map(Some)
    }

    /// One optimizer step. A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let k = self.opt.step;
        let samples = self.samples_at(k)?;
        let mut tape = Tape::new();
        let (breakdown, total) = self.losses(&mut tape, &samples)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}: {breakdown}", k + 1)));
        }
        let params = self.model.params_mut();
        params.zero_grad();
        match total {
            Some(total) => tape.backward(total)?.accumulate_into(params)?,
            None => {
                for (_, p) in params.iter_mut().filter(|(_, p)| !p.frozen) {
                    p.grad = Some(alloc::vec![T::zero(); p.value.len()]);
                }
            }
        }
        self.opt.step(params)?;
        params.zero_grad();
        Ok(breakdown)
    }

    /// Checks that the frozen partition is bit-identical to its state at construction.
    pub fn check_frozen(&self) -> Result<()> {
        if self.model.params().frozen_digest() != self.frozen_digest {
            return Err(Error::contract("frozen parameters changed during training"));
        }
        Ok(())
    }
}

/// Stage-1 training of a fresh text model on text-only documents. `on_step` sees every
/// step's losses.
pub fn pretrain_text<T: Real>(
    config: &ModelConfig,
    plan: &TrainPlan,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<Model<T>> {
    if plan.stage != Stage::TextPretrain {
        return Err(Error::config("pretrain_text needs a text-pretrain plan"));
    }
    let model = Model::text_only(config.clone(), plan.seed)?;
    let mut trainer = Trainer::new(plan.clone(), model)?;
    while !trainer.is_done() {
        let b = trainer.train_step()?;
        on_step(trainer.step_count(), &b);
    }
    Ok(trainer.into_parts().0)
}
