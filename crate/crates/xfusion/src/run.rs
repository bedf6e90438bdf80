//! Run directories: `<out>/<name>/{manifest.toml, model_card.toml, metrics.csv,
//! checkpoints/, plots/, samples/}`.
//!
//! The manifest is written before anything else and fixes every input of the run, so a
//! run can be resumed from its directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfusion_core::eval::eval_generation;
use xfusion_core::model::Model;
use xfusion_core::optim::OptimizerState;
use xfusion_core::params::hex;
use xfusion_core::synth::{SceneSpec, Vocabulary};
use xfusion_core::train::{Stage, TrainPlan, Trainer};

use crate::error::{CliError, CliResult};
use crate::metrics::{self, MetricsRow};
use crate::plan::{Preset, RunPlan};
use crate::ppm::encode_ppm;
use crate::session::{Session, Stop, Window};
use crate::store;
use crate::svg::{LinePlot, Series};

pub const MANIFEST: &str = "manifest.toml";
pub const FORMAT: u32 = 1;
const WINDOW_KEY: &str = "loss_window";
const BASE: &str = "base.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    PretrainText,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub name: String,
    pub kind: RunKind,
    pub format: u32,
    pub version: String,
    pub preset: Preset,
    pub seed: u64,
    /// Digest of the stage-1 parameters a multimodal run starts from.
    pub base_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run: RunInfo,
    pub plan: RunPlan,
}

impl Manifest {
    pub fn stage_plan(&self) -> &TrainPlan {
        match self.run.kind {
            RunKind::PretrainText => &self.plan.pretrain,
            RunKind::Train => &self.plan.train,
        }
    }
}

pub fn version_stamp() -> String {
    format!("xfusion {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step:07}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(store::FINAL)
    }

    pub fn read_manifest(&self) -> CliResult<Manifest> {
        let p = self.manifest();
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
        m.plan.validate()?;
        Ok(m)
    }

    /// The highest-step checkpoint and its step.
    pub fn latest_checkpoint(&self) -> CliResult<Option<(u64, PathBuf)>> {
        let dir = self.checkpoints();
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Ok(None);
        };
        let mut best: Option<(u64, PathBuf)> = None;
        for e in entries {
            let path = e.map_err(|e| CliError::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, path));
                }
            }
        }
        Ok(best)
    }

    /// Creates the directory tree and writes the manifest. Refuses to reuse a run.
    fn create(&self, manifest: &Manifest) -> CliResult<()> {
        if self.manifest().exists() {
            return Err(CliError::user(format!(
                "{} already holds a run; use `xfusion resume {}` or choose another --name",
                self.root.display(),
                self.root.display()
            )));
        }
        for d in [self.root.clone(), self.checkpoints(), self.plots(), self.samples()] {
            std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        let text = toml::to_string(manifest).expect("manifests always serialize");
        store::write_atomic(&self.manifest(), text.as_bytes())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed { step: u64 },
    Interrupted { step: u64 },
    AlreadyComplete { step: u64 },
}

/// Stage 1 into `<out>/<name>`.
pub fn start_pretrain(out: &Path, name: &str, plan: RunPlan, preset: Preset, opts: &RunOptions) -> CliResult<Outcome> {
    plan.validate()?;
    let run = RunDir::new(out.join(name));
    let manifest = Manifest {
        run: RunInfo {
            name: name.into(),
            kind: RunKind::PretrainText,
            format: FORMAT,
            version: version_stamp(),
            preset,
            seed: plan.pretrain.seed,
            base_digest: None,
        },
        plan,
    };
    run.create(&manifest)?;
    let model = Model::text_only(manifest.plan.model.clone(), manifest.plan.pretrain.seed)?;
    write_card(&run, &model)?;
    let trainer = Trainer::new(manifest.plan.pretrain.clone(), model)?;
    drive(&run, &manifest, trainer, None, Window::default(), opts)
}

/// Stage 2 into `<out>/<name>`, grown from the stage-1 checkpoint at `base`.
pub fn start_train(
    out: &Path,
    name: &str,
    plan: RunPlan,
    preset: Preset,
    base: &Path,
    opts: &RunOptions,
) -> CliResult<Outcome> {
    plan.validate()?;
    let base_path = store::resolve(base);
    if !base_path.exists() {
        return Err(CliError::user(format!(
            "stage-1 checkpoint {} not found; run `xfusion pretrain-text` first and pass its run directory or final.ckpt via --base",
            base_path.display()
        )));
    }
    let base_ck = store::load(&base_path)?;
    let base_model = Model::from_params(store::config_of(&base_ck)?, base_ck.params.clone())?;
    if base_model.is_multimodal() {
        return Err(CliError::user(format!("{} is not a stage-1 text checkpoint", base_path.display())));
    }
    check_base_matches(&plan, &base_model)?;
    let run = RunDir::new(out.join(name));
    let manifest = Manifest {
        run: RunInfo {
            name: name.into(),
            kind: RunKind::Train,
            format: FORMAT,
            version: version_stamp(),
            preset,
            seed: plan.train.seed,
            base_digest: Some(hex(&base_model.params().full_digest())),
        },
        plan,
    };
    run.create(&manifest)?;
    store::save(&run.checkpoints().join(BASE), &base_model, None, &[("stage", "text-pretrain".into())])?;
    let model = Model::multimodal(manifest.plan.model.clone(), base_model.params(), manifest.plan.train.seed)?;
    write_card(&run, &model)?;
    let trainer = Trainer::new(manifest.plan.train.clone(), model)?;
    drive(&run, &manifest, trainer, Some(&base_model), Window::default(), opts)
}

/// Stage-1 weights must fit the text tower the plan describes.
fn check_base_matches(plan: &RunPlan, base: &Model<f32>) -> CliResult<()> {
    let (a, b) = (&plan.model, base.config());
    let same = a.layers == b.layers
        && a.dim == b.dim
        && a.heads == b.heads
        && a.mlp_hidden == b.mlp_hidden
        && a.vocab_size == b.vocab_size
        && a.max_seq_len == b.max_seq_len;
    if same {
        Ok(())
    } else {
        Err(CliError::user(format!(
            "stage-1 checkpoint has layers={} dim={} heads={} mlp_hidden={}, the plan asks for layers={} dim={} heads={} mlp_hidden={}",
            b.layers, b.dim, b.heads, b.mlp_hidden, a.layers, a.dim, a.heads, a.mlp_hidden
        )))
    }
}

/// Continues the run in `dir` from its latest checkpoint. `overrides` must leave the
/// recorded plan unchanged.
pub fn resume(dir: &Path, overrides: &[String], opts: &RunOptions) -> CliResult<Outcome> {
    let run = RunDir::new(dir);
    let manifest = run.read_manifest()?;
    if manifest.run.format != FORMAT {
        return Err(CliError::user(format!("run format {} is not supported", manifest.run.format)));
    }
    if !overrides.is_empty() {
        let wanted = RunPlan::parse(&manifest.plan.to_toml(), Preset::Reference, overrides)?;
        if wanted != manifest.plan {
            return Err(CliError::user(format!(
                "refusing to resume: overrides [{}] change the plan recorded in {}",
                overrides.join(", "),
                run.manifest().display()
            )));
        }
    }
    let plan = manifest.stage_plan().clone();
    let base = match manifest.run.kind {
        RunKind::PretrainText => None,
        RunKind::Train => {
            let b = store::load_model(&run.checkpoints().join(BASE))?;
            if Some(hex(&b.params().full_digest())) != manifest.run.base_digest {
                return Err(CliError::user("the run's copy of its stage-1 checkpoint does not match the manifest digest"));
            }
            Some(b)
        }
    };
    let (trainer, window) = match run.latest_checkpoint()? {
        Some((step, path)) => {
            let ck = store::load(&path)?;
            let opt = ck
                .optimizer
                .clone()
                .ok_or_else(|| CliError::user(format!("{} has no optimizer state", path.display())))?;
            if opt.step != step {
                return Err(CliError::user(format!("{} records step {}", path.display(), opt.step)));
            }
            if opt.step >= plan.steps {
                if !opts.quiet {
                    println!("{}: already complete at step {}; nothing to do", dir.display(), opt.step);
                }
                return Ok(Outcome::AlreadyComplete { step: opt.step });
            }
            let window = match ck.meta.get(WINDOW_KEY) {
                Some(w) => Window::decode(w)?,
                None => Window::default(),
            };
            let model = Model::from_params(manifest.plan.model.clone(), ck.params)?;
            metrics::truncate_after(&run.metrics(), step)?;
            (resume_trainer(&plan, model, opt)?, window)
        }
        None => {
            metrics::truncate_after(&run.metrics(), 0)?;
            let model = match &base {
                None => Model::text_only(manifest.plan.model.clone(), plan.seed)?,
                Some(b) => Model::multimodal(manifest.plan.model.clone(), b.params(), plan.seed)?,
            };
            (Trainer::new(plan.clone(), model)?, Window::default())
        }
    };
    if !opts.quiet {
        println!("{}: resuming at step {}", dir.display(), trainer.step_count());
    }
    drive(&run, &manifest, trainer, base.as_ref(), window, opts)
}

fn resume_trainer(plan: &TrainPlan, model: Model<f32>, opt: OptimizerState<f32>) -> CliResult<Trainer<f32>> {
    Ok(Trainer::resume(plan.clone(), model, opt)?)
}

fn write_card(run: &RunDir, model: &Model<f32>) -> CliResult<()> {
    store::write_atomic(&run.root.join("model_card.toml"), store::model_card(model).as_bytes())
}

fn save_state(run: &RunDir, s: &Session<'_>, stage: Stage) -> CliResult<()> {
    let t = &s.trainer;
    store::save(
        &run.step_checkpoint(t.step_count()),
        t.model(),
        Some(t.optimizer()),
        &[("stage", stage.name().into()), (WINDOW_KEY, s.window.encode())],
    )
}

fn drive(
    run: &RunDir,
    manifest: &Manifest,
    trainer: Trainer<f32>,
    base: Option<&Model<f32>>,
    window: Window,
    opts: &RunOptions,
) -> CliResult<Outcome> {
    let stage = manifest.stage_plan().stage;
    let mut session = Session::new(trainer, base, manifest.plan.eval.clone(), window)?;
    let quiet = opts.quiet;
    let stop = session.run(
        opts.stop_after,
        |_, _| {},
        |row, s| {
            metrics::append(&run.metrics(), std::slice::from_ref(row))?;
            save_state(run, s, stage)?;
            if !quiet {
                println!("{}", summary(row));
            }
            Ok(())
        },
    )?;
    let step = session.trainer.step_count();
    match stop {
        Stop::Interrupted => {
            save_state(run, &session, stage)?;
            if !quiet {
                println!("stopped at step {step}; continue with `xfusion resume {}`", run.root.display());
            }
            Ok(Outcome::Interrupted { step })
        }
        Stop::Finished => {
            let model = session.trainer.model();
            store::save(&run.final_checkpoint(), model, None, &[("stage", stage.name().into())])?;
            write_plots(run)?;
            if model.is_multimodal() {
                write_samples(run, model, &manifest.plan)?;
            }
            if !quiet {
                println!("done: {}", run.final_checkpoint().display());
            }
            Ok(Outcome::Completed { step })
        }
    }
}

pub fn summary(r: &MetricsRow) -> String {
    let mut s = format!("step {:>6}  ar {:.4}", r.step, r.l_ar);
    if r.l_dm > 0.0 {
        s += &format!("  dm {:.4}", r.l_dm);
    }
    if r.l_align > 0.0 {
        s += &format!("  align {:.4}", r.l_align);
    }
    s += &format!("  ppl {:.4}", r.text_perplexity);
    let mut add = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            s += &format!("  {name} {v:.3}");
        }
    };
    add("caption", r.caption_accuracy);
    add("generation", r.generation_accuracy);
    add("divergence", r.text_divergence);
    s
}

pub const PLOTTED: [&str; 8] = [
    "l_ar",
    "l_dm",
    "l_align",
    "total",
    "text_perplexity",
    "text_divergence",
    "caption_accuracy",
    "generation_accuracy",
];

fn write_plots(run: &RunDir) -> CliResult<()> {
    let rows = metrics::read(&run.metrics())?;
    for metric in PLOTTED {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.value(metric).map(|v| (r.step as f64, v)))
            .collect();
        let absent_loss = metric.starts_with("l_") && points.iter().all(|p| p.1 == 0.0);
        if points.is_empty() || absent_loss {
            continue;
        }
        let plot = LinePlot {
            title: metric.replace('_', " "),
            x_label: "step".into(),
            y_label: metric.into(),
            series: vec![Series {
                name: metric.into(),
                points,
            }],
        };
        let p = run.plots().join(format!("{metric}.svg"));
        std::fs::write(&p, plot.to_svg()).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}

fn write_samples(run: &RunDir, model: &Model<f32>, plan: &RunPlan) -> CliResult<()> {
    let scenes = SceneSpec::held_out_split();
    let g = eval_generation(model, &scenes, &plan.eval.sampler, plan.eval.seed)?;
    let vocab = Vocabulary::new();
    for (i, (img, s)) in g.images.iter().zip(&scenes).enumerate() {
        let words = vocab.detokenize(&vocab.caption_of(s)).replace(' ', "-");
        let p = run.samples().join(format!("{i:02}-{words}.ppm"));
        std::fs::write(&p, encode_ppm(img, 4)).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}
