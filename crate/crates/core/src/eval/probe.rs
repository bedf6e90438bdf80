use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::make_flow_sample;
use crate::model::{Batch, Model};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::rng::RngStream;
use crate::synth::{assemble, SampleKind, SceneSpec, Vocabulary};
use crate::tensor::Tensor;

/// Which view of the image the vision tower sees while features are extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// Clean image, t = 0.
    Understanding,
    /// Lightly noised image at t = 0.02 (step 20 of a 1000-step schedule).
    Generation,
}

impl ProbeMode {
    pub fn timestep(self) -> f64 {
        match self {
            ProbeMode::Understanding => 0.0,
            ProbeMode::Generation => 0.02,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Understanding => "understanding",
            ProbeMode::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Shape,
    Color,
    Quadrant,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Shape, Attribute::Color, Attribute::Quadrant];

    pub fn classes(self) -> usize {
        match self {
            Attribute::Shape => 3,
            Attribute::Color | Attribute::Quadrant => 4,
        }
    }

    pub fn label(self, s: &SceneSpec) -> usize {
        match self {
            Attribute::Shape => s.shape.index(),
            Attribute::Color => s.color.index(),
            Attribute::Quadrant => s.quadrant.index(),
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.classes() as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Quadrant => "quadrant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Noise draws per scene in generation mode.
    pub draws: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-2,
            draws: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub mode: ProbeMode,
    pub attribute: Attribute,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// Mean-pooled image-stream hidden states after block `layer` for image-first sequences of
/// each scene, one row per (scene, draw).
pub fn probe_features<T: Real>(
    model: &Model<T>,
    layer: usize,
    mode: ProbeMode,
    scenes: &[SceneSpec],
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if layer > model.config().layers {
        return Err(Error::config(alloc::format!(
            "probe layer {layer} beyond {} layers",
            model.config().layers
        )));
    }
    let vocab = Vocabulary::new();
    let draws = if mode == ProbeMode::Understanding { 1 } else { draws.max(1) };
    let rng = RngStream::new(seed).split("probe");
    let mut seqs = Vec::with_capacity(scenes.len() * draws);
    for (i, s) in scenes.iter().enumerate() {
        for d in 0..draws {
            let mut seq = assemble(&vocab, SampleKind::I2T, s, false);
            if mode.timestep() > 0.0 {
                let mut r = rng.split_indexed("draw", (i * draws + d) as u64);
                let f = make_flow_sample(seq.clean.as_ref().expect("i2t has an image"), mode.timestep(), &mut r)?;
                seq.set_noised(f.t, f.xt)?;
            }
            seqs.push(seq);
        }
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(16) {
        let batch = Batch::new(chunk, model.config())?;
        let mut tape = Tape::new();
        let bound = tape.bind(model.params());
        let h = model.vision_features(&mut tape, &bound, &batch, layer)?;
        let h = tape.tensor(h);
        for r in batch.image_range.iter() {
            let r = r.clone().expect("i2t has an image");
            let mut m = vec![0.0; h.cols()];
            for row in r.clone() {
                m.iter_mut().zip(h.row(row)).for_each(|(a, &b)| *a += b.as_f64());
            }
            m.iter_mut().for_each(|a| *a /= r.len() as f64);
            out.push(m);
        }
    }
    Ok(out)
}

/// Linear classifier on frozen features: per-feature standardization with training-split
/// statistics (no learned parameters), then one softmax layer fit by Adam. Trained on the
/// training scenes, scored on the held-out scenes.
pub fn linear_probe<T: Real>(
    model: &Model<T>,
    layer: usize,
    mode: ProbeMode,
    attribute: Attribute,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let train = SceneSpec::train_split();
    let val = SceneSpec::held_out_split();
    let draws = if mode == ProbeMode::Understanding { 1 } else { cfg.draws.max(1) };
    let xs = probe_features(model, layer, mode, &train, cfg.draws, cfg.seed)?;
    let xv = probe_features(model, layer, mode, &val, cfg.draws, cfg.seed ^ 0x5eed)?;
    let labels = |scenes: &[SceneSpec]| -> Vec<usize> {
        scenes
            .iter()
            .flat_map(|s| core::iter::repeat_n(attribute.label(s), draws))
            .collect()
    };
    let (ys, yv) = (labels(&train), labels(&val));
    let head = fit_softmax(&xs, &ys, attribute.classes(), cfg)?;
    Ok(ProbeResult {
        layer,
        mode,
        attribute,
        train_accuracy: head.accuracy(&xs, &ys),
        accuracy: head.accuracy(&xv, &yv),
    })
}

/// Standardize-then-linear classifier.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Tensor<f64>,
    b: Vec<f64>,
}

impl ProbeHead {
    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.normalize(x);
        let k = self.b.len();
        let scores: Vec<f64> = (0..k)
            .map(|c| self.b[c] + z.iter().enumerate().map(|(i, v)| v * self.w.data()[i * k + c]).sum::<f64>())
            .collect();
        (0..k).fold(0, |best, c| if scores[c] > scores[best] { c } else { best })
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

pub fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let n = xs.len();
    if n == 0 || n != ys.len() {
        return Err(Error::dim("fit_softmax", &[n], &[ys.len()]));
    }
    let d = xs[0].len();
    let mut mean = vec![0.0; d];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for x in xs {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / Float::sqrt(v + 1e-5)).collect();
    let mut head = ProbeHead {
        mean,
        inv_std,
        w: Tensor::zeros(&[d, classes]),
        b: vec![0.0; classes],
    };
    let z: Vec<f64> = xs.iter().flat_map(|x| head.normalize(x)).collect();
    let z = Tensor::new(&[n, d], z)?;
    let mut ps = ParameterSet::new();
    let wi = ps.insert("w", Tensor::zeros(&[d, classes]))?;
    let bi = ps.insert("b", Tensor::zeros(&[classes]))?;
    let mut opt = OptimizerState::new(AdamWConfig {
        peak_lr: cfg.lr,
        ..AdamWConfig::default()
    });
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bound = tape.bind(&ps);
        let x = tape.constant(z.clone());
        let logits = tape.matmul(x, bound.get(wi))?;
        let logits = tape.add_bias(logits, bound.get(bi))?;
        let loss = tape.cross_entropy(logits, ys)?;
        let grads = tape.backward(loss)?;
        ps.zero_grad();
        grads.accumulate_into(&mut ps)?;
        opt.step(&mut ps)?;
    }
    head.w = ps.value(wi).clone();
    head.b = ps.value(bi).data().to_vec();
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features_are_learned() {
        let mut rng = RngStream::new(1);
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let mut v: Vec<f64> = rng.normal_vec(5, 0.1);
                v[i % 3] += 3.0;
                v
            })
            .collect();
        let ys: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let head = fit_softmax(&xs, &ys, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(head.accuracy(&xs, &ys), 1.0);
    }

    #[test]
    fn labels_are_balanced() {
        for a in Attribute::ALL {
            for split in [SceneSpec::train_split(), SceneSpec::held_out_split()] {
                let mut counts = vec![0; a.classes()];
                split.iter().for_each(|s| counts[a.label(s)] += 1);
                assert!(counts.iter().all(|&c| c == counts[0]), "{a:?} {counts:?}");
            }
        }
    }

    #[test]
    fn layer_out_of_range_is_an_error() {
        let cfg = crate::model::ModelConfig {
            layers: 1,
            dim: 8,
            vision_dim: 8,
            heads: 2,
            mlp_hidden: 16,
            align_layer: 1,
            ..Default::default()
        };
        let base = Model::<f64>::text_only(cfg.clone(), 0).unwrap();
        let m = Model::multimodal(cfg, base.params(), 1).unwrap();
        let p = ProbeConfig { epochs: 2, ..Default::default() };
        assert!(linear_probe(&m, 2, ProbeMode::Understanding, Attribute::Shape, &p).is_err());
        let r = linear_probe(&m, 1, ProbeMode::Generation, Attribute::Color, &p).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
}
