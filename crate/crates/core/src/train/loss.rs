use alloc::rc::Rc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::real::Real;
use crate::synth::MultimodalSequence;

/// Loss weights. The defaults weight captioning at 0.2 and denoising at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ar: f64,
    pub dm: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ar: 0.2,
            dm: 1.0,
            align: 0.5,
        }
    }
}

/// Per-batch loss components. An absent component is stored as exactly 0 with its flag off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ar: f64,
    pub dm: f64,
    pub align: f64,
    pub weights: LossWeights,
    pub total: f64,
    pub ar_present: bool,
    pub dm_present: bool,
    pub align_present: bool,
}

impl LossBreakdown {
    pub fn new(weights: LossWeights, ar: Option<f64>, dm: Option<f64>, align: Option<f64>) -> Self {
        let (a, d, g) = (ar.unwrap_or(0.0), dm.unwrap_or(0.0), align.unwrap_or(0.0));
        Self {
            ar: a,
            dm: d,
            align: g,
            weights,
            total: weights.ar * a + weights.dm * d + weights.align * g,
            ar_present: ar.is_some(),
            dm_present: dm.is_some(),
            align_present: align.is_some(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ar, self.dm, self.align, self.total].iter().all(|x| x.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_AR={:.6} L_DM={:.6} L_align={:.6} total={:.6}",
            self.ar, self.dm, self.align, self.total
        )
    }
}

/// Mean next-token cross-entropy over every supervised text position of the batch, or
/// `None` when no sequence carries supervision.
pub fn loss_ar<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    batch: &Batch<T>,
    seqs: &[MultimodalSequence],
) -> Result<Option<Var>> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        for (pos, tok) in seq.ar_targets() {
            rows.push(batch.text_row_of[i][pos]);
            targets.push(tok.index());
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let rows: Rc<[usize]> = rows.into();
    let picked = tape.gather_rows(logits, &rows)?;
    tape.cross_entropy(picked, &targets).map(Some)
}

/// Mean squared velocity error over the image rows of the sequences flagged in `targets`
/// (`Some(v*)` per sequence), or `None` when nothing is supervised.
pub fn loss_dm<T: Real>(
    tape: &mut Tape<T>,
    velocity: Option<Var>,
    batch: &Batch<T>,
    targets: &[Option<&[f32]>],
) -> Result<Option<Var>> {
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let range = batch.image_range[i]
            .clone()
            .ok_or_else(|| Error::contract("diffusion target on a sequence without an image"))?;
        if target.len() != range.len() * batch.patches.cols() {
            return Err(Error::dim("loss_dm", &[range.len(), batch.patches.cols()], &[target.len()]));
        }
        rows.extend(range);
        flat.extend(target.iter().map(|&v| T::c(v as f64)));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let velocity = velocity.ok_or_else(|| Error::contract("model produced no velocity"))?;
    let rows: Rc<[usize]> = rows.into();
    let picked = tape.gather_rows(velocity, &rows)?;
    tape.mse(picked, &flat).map(Some)
}

/// `1 − cos(W·h, f)` averaged over image rows, for hidden states `h[n, d_v]`, projection
/// `W[d_v, d_teacher]` and frozen teacher features `f[n, d_teacher]`.
pub fn loss_align<T: Real>(tape: &mut Tape<T>, hidden: Var, w: Var, teacher: Var) -> Result<Var> {
    let projected = tape.matmul(hidden, w)?;
    tape.cosine_distance(projected, teacher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngStream;
    use crate::synth::{assemble, SampleKind, SceneSpec, Vocabulary};
    use crate::tensor::Tensor;

    fn batch_of(kinds: &[SampleKind]) -> (Vec<MultimodalSequence>, Batch<f64>) {
        let v = Vocabulary::new();
        let seqs: Vec<_> = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| assemble(&v, k, &SceneSpec::from_index(i * 7).unwrap(), i % 2 == 0))
            .collect();
        let b = Batch::new(&seqs, &ModelConfig::default()).unwrap();
        (seqs, b)
    }

    fn nll_oracle(row: &[f64], target: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        lse - row[target]
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (seqs, b) = batch_of(&[SampleKind::TextOnly, SampleKind::T2I]);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[b.n_text(), 23]));
        let l = loss_ar(&mut tape, logits, &b, &seqs).unwrap().unwrap();
        assert!((tape.scalar(l) - 23f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ar_matches_per_position_oracle() {
        let (seqs, b) = batch_of(&[SampleKind::I2T, SampleKind::TextOnly]);
        let mut rng = RngStream::new(4);
        let lt = Tensor::<f64>::randn(&[b.n_text(), 23], 2.0, &mut rng);
        let mut tape = Tape::new();
        let logits = tape.constant(lt.clone());
        let got = loss_ar(&mut tape, logits, &b, &seqs).unwrap().unwrap();
        let got = tape.scalar(got);
        let mut total = 0.0;
        let mut n = 0;
        for (i, s) in seqs.iter().enumerate() {
            let text_pos = s.text_positions();
            for (pos, tok) in s.ar_targets() {
                let r = text_pos.iter().position(|&p| p == pos).unwrap()
                    + seqs[..i].iter().map(|q| q.text_positions().len()).sum::<usize>();
                total += nll_oracle(lt.row(r), tok.index());
                n += 1;
            }
        }
        assert_eq!(n, 7 + 18);
        assert!((got - total / n as f64).abs() < 1e-7);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let (seqs, b) = batch_of(&[SampleKind::TextOnly]);
        let mut data = alloc::vec![0.0; b.n_text() * 23];
        for (pos, tok) in seqs[0].ar_targets() {
            data[pos * 23 + tok.index()] = 50.0;
        }
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[b.n_text(), 23], data).unwrap());
        let l = loss_ar(&mut tape, logits, &b, &seqs).unwrap().unwrap();
        assert!(tape.scalar(l) < 1e-12);
    }

    #[test]
    fn dropped_caption_has_no_ar_term() {
        let (mut seqs, _) = batch_of(&[SampleKind::T2I]);
        seqs[0].drop_caption();
        let b: Batch<f64> = Batch::new(&seqs, &ModelConfig::default()).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[b.n_text(), 23]));
        assert!(loss_ar(&mut tape, logits, &b, &seqs).unwrap().is_none());
    }

    #[test]
    fn dm_matches_elementwise_oracle() {
        let (_, b) = batch_of(&[SampleKind::T2I, SampleKind::TextOnly, SampleKind::I2T]);
        let mut rng = RngStream::new(8);
        let pred = Tensor::<f64>::randn(&[128, 12], 1.0, &mut rng);
        let t0: Vec<f32> = rng.normal_vec(768, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(pred.clone());
        let l = loss_dm(&mut tape, Some(v), &b, &[Some(&t0), None, None]).unwrap().unwrap();
        let oracle: f64 = pred.data()[..768]
            .iter()
            .zip(&t0)
            .map(|(&p, &t)| (p - t as f64).powi(2))
            .sum::<f64>()
            / 768.0;
        assert!((tape.scalar(l) - oracle).abs() < 1e-7);
        let none = loss_dm(&mut tape, Some(v), &b, &[None, None, None]).unwrap();
        assert!(none.is_none());
        assert!(loss_dm(&mut tape, Some(v), &b, &[None, Some(&t0), None]).is_err());
    }

    #[test]
    fn dm_is_zero_at_the_target() {
        let (_, b) = batch_of(&[SampleKind::T2I]);
        let mut rng = RngStream::new(9);
        let t: Vec<f32> = rng.normal_vec(768, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[64, 12], t.iter().map(|&x| x as f64).collect()).unwrap());
        let l = loss_dm(&mut tape, Some(v), &b, &[Some(&t)]).unwrap().unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn align_bounds_and_oracle() {
        let mut rng = RngStream::new(10);
        let h = Tensor::<f64>::randn(&[5, 32], 1.0, &mut rng);
        let eye = Tensor::new(&[32, 32], (0..1024).map(|i| if i % 33 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let neg: Vec<f64> = h.data().iter().map(|x| -x).collect();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let w = tape.constant(eye);
        let same = tape.constant(h.clone());
        let anti = tape.constant(Tensor::new(&[5, 32], neg).unwrap());
        let l0 = loss_align(&mut tape, hv, w, same).unwrap();
        let l2 = loss_align(&mut tape, hv, w, anti).unwrap();
        assert!(tape.scalar(l0).abs() < 1e-12);
        assert!((tape.scalar(l2) - 2.0).abs() < 1e-12);
        let f = Tensor::<f64>::randn(&[5, 32], 1.0, &mut rng);
        let fv = tape.constant(f.clone());
        let l = loss_align(&mut tape, hv, w, fv).unwrap();
        let l = tape.scalar(l);
        let oracle = (0..5)
            .map(|r| {
                let (a, b) = (h.row(r), f.row(r));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            })
            .sum::<f64>()
            / 5.0;
        assert!((l - oracle).abs() < 1e-7);
        assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn breakdown_additivity_and_absence() {
        let b = LossBreakdown::new(LossWeights::default(), Some(1.5), None, Some(0.25));
        assert_eq!(b.dm, 0.0);
        assert!(!b.dm_present);
        assert!((b.total - (0.2 * 1.5 + 0.5 * 0.25)).abs() < 1e-12);
    }
}
