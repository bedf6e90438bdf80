//! The training loop with periodic evaluation, shared by runs and ablation grids.

use xfusion_core::eval::{evaluate, EvalConfig};
use xfusion_core::model::Model;
use xfusion_core::params::hex;
use xfusion_core::synth::{SampleKind, SampleStream};
use xfusion_core::train::{LossBreakdown, Stage, TrainPlan, Trainer};

use crate::error::{CliError, CliResult};
use crate::metrics::MetricsRow;

/// Running sums of the loss components since the last evaluation. A component is
/// averaged over the steps in which it was present.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Window {
    sums: [f64; 4],
    counts: [u64; 4],
}

impl Window {
    pub fn push(&mut self, b: &LossBreakdown) {
        let parts = [
            (b.ar, b.ar_present),
            (b.dm, b.dm_present),
            (b.align, b.align_present),
            (b.total, true),
        ];
        for (i, (v, present)) in parts.into_iter().enumerate() {
            if present {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    /// `[ar, dm, align, total]`; absent components read 0.
    pub fn means(&self) -> [f64; 4] {
        core::array::from_fn(|i| match self.counts[i] {
            0 => 0.0,
            n => self.sums[i] / n as f64,
        })
    }

    /// Exact text form (f64 bit patterns) for checkpoint metadata.
    pub fn encode(&self) -> String {
        let mut parts: Vec<String> = self.sums.iter().map(|s| format!("{:016x}", s.to_bits())).collect();
        parts.extend(self.counts.iter().map(|c| c.to_string()));
        parts.join(",")
    }

    pub fn decode(s: &str) -> CliResult<Self> {
        let bad = || CliError::user(format!("checkpoint loss window `{s}` is malformed"));
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 8 {
            return Err(bad());
        }
        let mut w = Window::default();
        for i in 0..4 {
            w.sums[i] = f64::from_bits(u64::from_str_radix(parts[i], 16).map_err(|_| bad())?);
            w.counts[i] = parts[4 + i].parse().map_err(|_| bad())?;
        }
        Ok(w)
    }
}

/// Counts of drawn sample kinds `[t2i, i2t, text]`, replayed from the plan's stream.
#[derive(Debug, Clone)]
pub struct Exposure {
    stream: SampleStream,
    batch: u64,
    drawn: u64,
    counts: [u64; 3],
}

impl Exposure {
    pub fn new(plan: &TrainPlan) -> CliResult<Self> {
        let stream = match plan.stage {
            Stage::TextPretrain => SampleStream::text_only(plan.seed),
            Stage::Multimodal => SampleStream::new(plan.mix, plan.seed)?,
        };
        Ok(Self {
            stream,
            batch: plan.batch_size as u64,
            drawn: 0,
            counts: [0; 3],
        })
    }

    /// Counts after `steps` completed steps.
    pub fn at(&mut self, steps: u64) -> [u64; 3] {
        let target = steps * self.batch;
        if target < self.drawn {
            self.drawn = 0;
            self.counts = [0; 3];
        }
        while self.drawn < target {
            let k = match self.stream.draw(self.drawn).kind {
                SampleKind::T2I => 0,
                SampleKind::I2T => 1,
                SampleKind::TextOnly => 2,
            };
            self.counts[k] += 1;
            self.drawn += 1;
        }
        self.counts
    }
}

/// Why [`Session::run`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Finished,
    /// `stop_after` was reached first.
    Interrupted,
}

pub struct Session<'b> {
    pub trainer: Trainer<f32>,
    pub window: Window,
    base: Option<&'b Model<f32>>,
    eval: EvalConfig,
    exposure: Exposure,
}

impl<'b> Session<'b> {
    pub fn new(trainer: Trainer<f32>, base: Option<&'b Model<f32>>, eval: EvalConfig, window: Window) -> CliResult<Self> {
        let exposure = Exposure::new(trainer.plan())?;
        Ok(Self {
            trainer,
            window,
            base,
            eval,
            exposure,
        })
    }

    fn is_eval_step(&self, step: u64) -> bool {
        let plan = self.trainer.plan();
        step.is_multiple_of(plan.eval_every) || step == plan.steps
    }

    /// Evaluates the current weights and resets the loss window.
    pub fn evaluate(&mut self) -> CliResult<MetricsRow> {
        self.trainer.check_frozen()?;
        let step = self.trainer.step_count();
        let report = evaluate(self.trainer.model(), self.base, &self.eval, step)?;
        let digest = hex(&self.trainer.model().params().frozen_digest());
        let row = MetricsRow::from_report(&report, self.exposure.at(step), self.window.means(), digest);
        self.window = Window::default();
        Ok(row)
    }

    /// Trains until the plan's step count or `stop_after`, evaluating every `eval_every`
    /// steps and at the last step. `on_eval` sees each row with the session state that
    /// produced it.
    pub fn run(
        &mut self,
        stop_after: Option<u64>,
        mut on_step: impl FnMut(u64, &LossBreakdown),
        mut on_eval: impl FnMut(&MetricsRow, &Session<'b>) -> CliResult<()>,
    ) -> CliResult<Stop> {
        while !self.trainer.is_done() {
            let b = self.trainer.train_step()?;
            self.window.push(&b);
            let step = self.trainer.step_count();
            on_step(step, &b);
            if self.is_eval_step(step) {
                let row = self.evaluate()?;
                on_eval(&row, self)?;
            }
            if stop_after.is_some_and(|s| step >= s) && !self.trainer.is_done() {
                return Ok(Stop::Interrupted);
            }
        }
        Ok(Stop::Finished)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use xfusion_core::train::LossWeights;

    #[test]
    fn window_means_skip_absent_components() {
        let w8 = LossWeights::default();
        let mut w = Window::default();
        w.push(&LossBreakdown::new(w8, Some(1.0), None, None));
        w.push(&LossBreakdown::new(w8, Some(3.0), Some(0.5), None));
        let m = w.means();
        assert_eq!(m[0], 2.0);
        assert_eq!(m[1], 0.5);
        assert_eq!(m[2], 0.0);
        assert_eq!(Window::decode(&w.encode()).unwrap(), w);
        assert!(Window::decode("1,2").is_err());
    }

    #[test]
    fn exposure_matches_a_direct_count() {
        let plan = TrainPlan {
            batch_size: 4,
            ..TrainPlan::default()
        };
        let mut e = Exposure::new(&plan).unwrap();
        let c = e.at(25);
        assert_eq!(c.iter().sum::<u64>(), 100);
        let s = SampleStream::new(plan.mix, plan.seed).unwrap();
        let t2i = (0..100).filter(|&i| s.draw(i).kind == SampleKind::T2I).count() as u64;
        assert_eq!(c[0], t2i);
        assert_eq!(e.at(10), Exposure::new(&plan).unwrap().at(10));
    }
}
