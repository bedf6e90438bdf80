//! Plan files: TOML with one section per pipeline stage.
//!
//! ```toml
//! [model]
//! variant = "dual-tower"
//! layers = 6
//!
//! [train]
//! steps = 3000
//!
//! [train.noise]
//! t_max_i2t = 0.0
//! ```
//!
//! A file only lists what differs from its preset. Keys the preset does not have are
//! rejected with their dotted path; `key=value` overrides are applied after the file.

use std::fmt;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xfusion_core::eval::EvalConfig;
use xfusion_core::model::ModelConfig;
use xfusion_core::train::{Stage, TrainPlan};

use crate::error::{CliError, CliResult};

/// Everything a run needs: architecture, stage-1 schedule, stage-2 schedule, evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    pub train: TrainPlan,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Reference scale: width 96, six layers, batch 32, 3000 multimodal steps.
    #[default]
    Reference,
    /// Reduced scale that finishes in minutes on one core.
    Quick,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::Quick => "quick",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Preset::Reference, Preset::Quick].into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl RunPlan {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Reference => Self {
                model: ModelConfig::default(),
                pretrain: TrainPlan::text_pretrain(),
                train: TrainPlan::default(),
                eval: EvalConfig::default(),
            },
            Preset::Quick => quick(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        if self.pretrain.stage != Stage::TextPretrain {
            return Err(CliError::user("[pretrain] stage must be \"text-pretrain\""));
        }
        if self.train.stage != Stage::Multimodal {
            return Err(CliError::user("[train] stage must be \"multimodal\""));
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        if let Some(&l) = self.eval.probe_layers.iter().find(|&&l| l > self.model.layers) {
            return Err(CliError::user(format!(
                "eval.probe_layers contains {l}, beyond {} layers",
                self.model.layers
            )));
        }
        if self.eval.sampler.steps == 0 {
            return Err(CliError::user("eval.sampler.steps must be positive"));
        }
        Ok(())
    }

    /// Resolves `text` on top of `preset`, then applies `overrides`.
    pub fn parse(text: &str, preset: Preset, overrides: &[String]) -> CliResult<Self> {
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::user(format!("plan file: {e}")))?;
        let mut base = to_table(&Self::preset(preset));
        merge(&mut base, file, "")?;
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let plan: RunPlan = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::user(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plans always serialize")
    }
}

fn quick() -> RunPlan {
    let model = ModelConfig {
        layers: 4,
        dim: 64,
        vision_dim: 64,
        heads: 4,
        mlp_hidden: 170,
        align_layer: 2,
        ..ModelConfig::default()
    };
    let mut pretrain = TrainPlan::text_pretrain();
    pretrain.batch_size = 8;
    pretrain.steps = 1000;
    pretrain.eval_every = 250;
    pretrain.optim.peak_lr = 3e-3;
    let mut train = TrainPlan {
        batch_size: 8,
        steps: 8000,
        eval_every: 1000,
        ..TrainPlan::default()
    };
    train.optim.peak_lr = 3e-3;
    let mut eval = EvalConfig::default();
    eval.sampler.steps = 30;
    RunPlan {
        model,
        pretrain,
        train,
        eval,
    }
}

fn to_table(plan: &RunPlan) -> Table {
    match Value::try_from(plan).expect("plans always serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

fn merge(base: &mut Table, file: Table, prefix: &str) -> CliResult<()> {
    for (k, v) in file {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(CliError::user(format!("unknown plan key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(f)) => merge(b, f, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(CliError::user(format!("`{path}` is a section, not a value")));
            }
            (Some(_), Value::Table(_)) => {
                return Err(CliError::user(format!("`{path}` is a value, not a section")));
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// `section.key=value`. The value is read as a TOML literal, or as a bare string when it
/// does not parse as one (`model.variant=gated-tower`).
pub fn apply_override(base: &mut Table, item: &str) -> CliResult<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::user(format!("override `{item}` is not key=value")))?;
    let (path, raw) = (path.trim(), raw.trim());
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut table = base;
    let mut keys = path.split('.').peekable();
    while let Some(k) = keys.next() {
        if keys.peek().is_none() {
            return match table.get_mut(k) {
                Some(Value::Table(_)) => Err(CliError::user(format!("`{path}` is a section, not a value"))),
                Some(slot) => {
                    *slot = value;
                    Ok(())
                }
                None => Err(CliError::user(format!("unknown plan key `{path}`"))),
            };
        }
        table = match table.get_mut(k) {
            Some(Value::Table(t)) => t,
            _ => return Err(CliError::user(format!("unknown plan key `{path}`"))),
        };
    }
    Err(CliError::user("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use xfusion_core::model::TowerVariant;

    #[test]
    fn empty_file_is_the_preset() {
        for p in [Preset::Reference, Preset::Quick] {
            let plan = RunPlan::parse("", p, &[]).unwrap();
            assert_eq!(plan, RunPlan::preset(p));
        }
    }

    #[test]
    fn resolved_plan_round_trips() {
        let plan = RunPlan::parse(
            "[model]\nvariant = \"gated-tower\"\n[train.mix]\nt2i = 0.5\ni2t = 0.5\n",
            Preset::Quick,
            &["train.noise.t_max_i2t=0.25".into(), "eval.probe_layers=[0, 2]".into()],
        )
        .unwrap();
        assert_eq!(plan.model.variant, TowerVariant::GatedTower);
        assert_eq!(plan.train.noise.t_max_i2t, 0.25);
        assert_eq!(plan.eval.probe_layers, vec![0, 2]);
        let again = RunPlan::parse(&plan.to_toml(), Preset::Reference, &[]).unwrap();
        assert_eq!(again, plan);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let plan = RunPlan::parse("[train]\nsteps = 10\n", Preset::Reference, &["train.steps=20".into()]).unwrap();
        assert_eq!(plan.train.steps, 20);
        let plan = RunPlan::parse("", Preset::Reference, &["model.variant=single-tower".into()]).unwrap();
        assert_eq!(plan.model.variant, TowerVariant::SingleTower);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let cases = [
            ("[train]\nstepz = 1\n", vec![]),
            ("[bogus]\n", vec![]),
            ("", vec!["train.optim.lr=1".to_string()]),
            ("", vec!["train=1".to_string()]),
            ("", vec!["train.steps".to_string()]),
        ];
        for (text, ov) in cases {
            let e = RunPlan::parse(text, Preset::Reference, &ov).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{e}");
        }
        let e = RunPlan::parse("[train]\nstepz = 1\n", Preset::Reference, &[]).unwrap_err();
        assert!(e.to_string().contains("train.stepz"), "{e}");
    }

    #[test]
    fn invalid_values_are_user_errors() {
        for ov in ["train.batch_size=0", "model.variant=quad-tower", "pretrain.stage=multimodal", "eval.probe_layers=[9]"] {
            let e = RunPlan::parse("", Preset::Reference, &[ov.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{ov}: {e}");
        }
    }
}
