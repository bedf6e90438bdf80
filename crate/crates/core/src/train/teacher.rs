use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParameterSet;
use crate::rng::RngStream;
use crate::synth::{patchify, render_scene, Color, Quadrant, SceneSpec, Shape, N_PATCHES, PATCH, PATCH_DIM};
use crate::tensor::Tensor;

const GRID: usize = 8;
const INPUT: usize = PATCH_DIM + 2;
const STEPS: usize = 300;

/// Frozen per-patch image encoder standing in for an external semantic model. Two
/// tanh layers over (patch, coordinates) produce per-position features; a mean-pooled
/// linear head per attribute is used only to train them.
#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    params: ParameterSet<f32>,
    train_accuracy: f64,
}

impl TeacherEncoder {
    pub const DIM: usize = 32;

    /// Supervised training on the training-split scenes; deterministic in `seed`.
    pub fn train(seed: u64) -> Result<Self> {
        let rng = RngStream::new(seed).split("teacher");
        let mut ps = ParameterSet::new();
        let d = Self::DIM;
        let init = |label: &str, shape: &[usize]| {
            let std = 1.0 / Float::sqrt(shape[0] as f64);
            Tensor::randn(shape, std, &mut rng.split(label))
        };
        ps.insert("w1", init("w1", &[INPUT, d]))?;
        ps.insert("b1", Tensor::zeros(&[d]))?;
        ps.insert("w2", init("w2", &[d, d]))?;
        ps.insert("b2", Tensor::zeros(&[d]))?;
        ps.insert("head.shape", init("hs", &[d, 3]))?;
        ps.insert("head.color", init("hc", &[d, 4]))?;
        ps.insert("head.quadrant", init("hq", &[d, 4]))?;
        let scenes = SceneSpec::train_split();
        let inputs = stack_inputs(&scenes)?;
        let segments: Vec<(usize, usize)> = (0..scenes.len()).map(|i| (i * N_PATCHES, N_PATCHES)).collect();
        let labels = |f: fn(&SceneSpec) -> usize| scenes.iter().map(f).collect::<Vec<_>>();
        let ys = [
            labels(|s| s.shape.index()),
            labels(|s| s.color.index()),
            labels(|s| s.quadrant.index()),
        ];
        let mut opt = OptimizerState::new(AdamWConfig {
            peak_lr: 1e-2,
            ..AdamWConfig::default()
        });
        let mut teacher = Self {
            params: ps,
            train_accuracy: 0.0,
        };
        for _ in 0..STEPS {
            let mut tape = Tape::new();
            let b = tape.bind(&teacher.params);
            let x = tape.constant(inputs.clone());
            let h = teacher.encode(&mut tape, &b, x)?;
            let pooled = tape.mean_segments(h, &segments)?;
            let mut terms = Vec::new();
            for (head, y) in ["head.shape", "head.color", "head.quadrant"].iter().zip(&ys) {
                let w = b.get(teacher.params.id(head)?);
                let logits = tape.matmul(pooled, w)?;
                terms.push((tape.cross_entropy(logits, y)?, 1.0));
            }
            let loss = tape.weighted_sum(&terms)?;
            let grads = tape.backward(loss)?;
            teacher.params.zero_grad();
            grads.accumulate_into(&mut teacher.params)?;
            opt.step(&mut teacher.params)?;
        }
        teacher.params.zero_grad();
        for (_, p) in teacher.params.iter_mut() {
            p.frozen = true;
        }
        let correct = scenes
            .iter()
            .map(|s| teacher.classify(&patchify(&render_scene(s), PATCH)?).map(|p| p == *s))
            .collect::<Result<Vec<bool>>>()?;
        teacher.train_accuracy = correct.iter().filter(|&&c| c).count() as f64 / scenes.len() as f64;
        Ok(teacher)
    }

    pub fn dim(&self) -> usize {
        Self::DIM
    }

    /// Fraction of training scenes whose three attributes the heads recover.
    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    /// Per-position features `[64, DIM]` of a clean patch set `[64, 12]`.
    pub fn features(&self, patches: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params);
        let x = tape.constant(with_coords(patches)?);
        let h = self.encode(&mut tape, &b, x)?;
        Ok(tape.tensor(h))
    }

    pub fn classify(&self, patches: &Tensor<f32>) -> Result<SceneSpec> {
        let f = self.features(patches)?;
        let d = Self::DIM;
        let mut pooled = vec![0.0f32; d];
        for r in 0..N_PATCHES {
            pooled.iter_mut().zip(f.row(r)).for_each(|(a, &b)| *a += b / N_PATCHES as f32);
        }
        let argmax = |name: &str| -> Result<usize> {
            let w = self.params.by_name(name)?;
            let k = w.value.cols();
            let scores: Vec<f32> = (0..k)
                .map(|c| (0..d).map(|i| pooled[i] * w.value.data()[i * k + c]).sum())
                .collect();
            Ok((0..k).fold(0, |best, c| if scores[c] > scores[best] { c } else { best }))
        };
        Ok(SceneSpec::new(
            Shape::ALL[argmax("head.shape")?],
            Color::ALL[argmax("head.color")?],
            Quadrant::ALL[argmax("head.quadrant")?],
        ))
    }

    fn encode(&self, tape: &mut Tape<f32>, b: &Bound, x: Var) -> Result<Var> {
        let p = |n: &str| self.params.id(n).map(|id| b.get(id));
        let h = tape.matmul(x, p("w1")?)?;
        let h = tape.add_bias(h, p("b1")?)?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, p("w2")?)?;
        let h = tape.add_bias(h, p("b2")?)?;
        Ok(tape.tanh(h))
    }
}

/// Appends the patch-grid coordinates, scaled to [−1, 1], to every patch vector.
fn with_coords(patches: &Tensor<f32>) -> Result<Tensor<f32>> {
    if patches.shape() != [N_PATCHES, PATCH_DIM] {
        return Err(Error::dim("teacher", patches.shape(), &[N_PATCHES, PATCH_DIM]));
    }
    let mut out = Vec::with_capacity(N_PATCHES * INPUT);
    for r in 0..N_PATCHES {
        out.extend_from_slice(patches.row(r));
        let (py, px) = (r / GRID, r % GRID);
        out.push(py as f32 / (GRID - 1) as f32 * 2.0 - 1.0);
        out.push(px as f32 / (GRID - 1) as f32 * 2.0 - 1.0);
    }
    Tensor::new(&[N_PATCHES, INPUT], out)
}

fn stack_inputs(scenes: &[SceneSpec]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(scenes.len() * N_PATCHES * INPUT);
    for s in scenes {
        data.extend_from_slice(with_coords(&patchify(&render_scene(s), PATCH)?)?.data());
    }
    Tensor::new(&[scenes.len() * N_PATCHES, INPUT], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_learns_the_training_scenes_and_is_deterministic() {
        let a = TeacherEncoder::train(3).unwrap();
        assert_eq!(a.train_accuracy(), 1.0);
        let b = TeacherEncoder::train(3).unwrap();
        let x = patchify(&render_scene(&SceneSpec::from_index(2).unwrap()), PATCH).unwrap();
        assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
        assert_eq!(a.features(&x).unwrap().shape(), [64, TeacherEncoder::DIM]);
        assert!(a.params.iter().all(|(_, p)| p.frozen));
    }
}
