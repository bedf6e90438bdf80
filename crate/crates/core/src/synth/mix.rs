use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::sequence::SampleKind;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Fractions of T2I and I2T samples; the remainder is text-only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatio {
    pub t2i: f64,
    pub i2t: f64,
}

impl Default for MixRatio {
    fn default() -> Self {
        Self {
            t2i: 2.0 / 3.0,
            i2t: 1.0 / 3.0,
        }
    }
}

impl MixRatio {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.t2i) || !ok(self.i2t) || self.t2i + self.i2t > 1.0 + 1e-9 {
            return Err(Error::config(alloc::format!(
                "mix fractions must be non-negative with sum at most 1, got t2i={} i2t={}",
                self.t2i,
                self.i2t
            )));
        }
        if self.t2i == 0.0 && self.i2t == 0.0 {
            return Err(Error::config("mix fractions are all zero"));
        }
        Ok(())
    }

    pub fn kind_for(&self, u: f64) -> SampleKind {
        if u < self.t2i {
            SampleKind::T2I
        } else if u < self.t2i + self.i2t {
            SampleKind::I2T
        } else {
            SampleKind::TextOnly
        }
    }
}

/// One drawn sample description. `seed` keys every random choice made downstream
/// (noise, timestep, caption dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDraw {
    pub index: u64,
    pub kind: SampleKind,
    pub scene: SceneSpec,
    pub variant: bool,
    pub seed: u64,
}

/// Infinite i.i.d. sample stream; `draw(index)` is a pure function of the seed and index.
/// Image/caption pairs come from the training split, text-only documents from all scenes.
#[derive(Debug, Clone)]
pub struct SampleStream {
    ratio: MixRatio,
    root: RngStream,
    train: Vec<SceneSpec>,
    all: Vec<SceneSpec>,
}

pub fn mix_batches(ratio: MixRatio, seed: u64) -> Result<SampleStream> {
    SampleStream::new(ratio, seed)
}

impl SampleStream {
    pub fn new(ratio: MixRatio, seed: u64) -> Result<Self> {
        ratio.validate()?;
        Ok(Self {
            ratio,
            root: RngStream::new(seed).split("samples"),
            train: SceneSpec::train_split(),
            all: SceneSpec::all(),
        })
    }

    /// Stream of text-only documents, used for language-model pretraining.
    pub fn text_only(seed: u64) -> Self {
        Self {
            ratio: MixRatio { t2i: 0.0, i2t: 0.0 },
            root: RngStream::new(seed).split("samples"),
            train: SceneSpec::train_split(),
            all: SceneSpec::all(),
        }
    }

    pub fn ratio(&self) -> MixRatio {
        self.ratio
    }

    pub fn draw(&self, index: u64) -> SampleDraw {
        let mut rng = self.root.split_indexed("sample", index);
        let kind = self.ratio.kind_for(rng.uniform());
        let pool = match kind {
            SampleKind::TextOnly => &self.all,
            _ => &self.train,
        };
        let scene = pool[rng.below(pool.len())];
        let variant = rng.bernoulli(0.5);
        SampleDraw {
            index,
            kind,
            scene,
            variant,
            seed: rng.split("noise").key(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleDraw> + '_ {
        (0u64..).map(move |i| self.draw(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_to_one_frequencies() {
        let s = mix_batches(MixRatio::default(), 1).unwrap();
        let n = 10_000;
        let t2i = s.iter().take(n).filter(|d| d.kind == SampleKind::T2I).count();
        let frac = t2i as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "{frac}");
    }

    #[test]
    fn degenerate_ratios() {
        let only = |r: MixRatio, k: SampleKind| {
            let s = mix_batches(r, 3).unwrap();
            assert!(s.iter().take(500).all(|d| d.kind == k));
        };
        only(MixRatio { t2i: 1.0, i2t: 0.0 }, SampleKind::T2I);
        only(MixRatio { t2i: 0.0, i2t: 1.0 }, SampleKind::I2T);
        assert!(mix_batches(MixRatio { t2i: 0.0, i2t: 0.0 }, 0).is_err());
        assert!(mix_batches(MixRatio { t2i: 0.8, i2t: 0.3 }, 0).is_err());
        assert!(mix_batches(MixRatio { t2i: -0.1, i2t: 0.3 }, 0).is_err());
    }

    #[test]
    fn draws_are_pure_and_pairs_never_held_out() {
        let a = mix_batches(MixRatio { t2i: 0.5, i2t: 0.3 }, 9).unwrap();
        let b = mix_batches(MixRatio { t2i: 0.5, i2t: 0.3 }, 9).unwrap();
        for i in [0u64, 5, 1000, 77] {
            assert_eq!(a.draw(i), b.draw(i));
        }
        for d in a.iter().take(2000) {
            if d.kind != SampleKind::TextOnly {
                assert!(!d.scene.is_held_out());
            }
        }
    }
}
