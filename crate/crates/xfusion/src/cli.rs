//! The `xfusion` command line. Exit codes: 0 success, 1 user error, 2 internal error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use xfusion_core::eval::{eval_caption, linear_probe, Attribute, CaptionEval, NextToken, OracleClassifier, ProbeMode};
use xfusion_core::flow::{sample_images, SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use xfusion_core::model::{count_flops, Model, ModelConfig, TowerVariant};
use xfusion_core::synth::{
    assemble, patchify, render_scene, SampleKind, SampleStream, SceneSpec, Slot, TokenId, Vocabulary, PATCH,
};
use xfusion_core::RngStream;

use crate::error::{CliError, CliResult};
use crate::grid::{self, GridAxis};
use crate::plan::{Preset, RunPlan};
use crate::ppm::{decode_ppm, encode_ppm};
use crate::run::{self, Outcome, RunOptions};
use crate::store;

#[derive(Debug, Parser)]
#[command(name = "xfusion", version, about = "Adds a vision tower to a frozen language model and measures what it costs")]
pub struct Cli {
    /// Parent directory of every run directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// TOML plan file; omitted keys keep the preset's values.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    pub preset: Preset,
    /// `section.key=value` override, applied after the plan file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every stage; defaults to XFUSION_SEED, then to the plan's seeds.
    #[arg(long, env = "XFUSION_SEED")]
    pub seed: Option<u64>,
}

impl PlanArgs {
    pub fn resolve(&self) -> CliResult<RunPlan> {
        let text = match &self.plan {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            for k in ["pretrain.seed", "train.seed", "eval.seed", "eval.probe.seed"] {
                overrides.push(format!("{k}={s}"));
            }
        }
        RunPlan::parse(&text, self.preset, &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset manifest of drawn samples and render every scene.
    GenData {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 1024)]
        count: u64,
        #[arg(long, default_value = "data")]
        name: String,
    },
    /// Stage 1: train the language model on text-only documents.
    PretrainText {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value = "stage1")]
        name: String,
        /// Stop with a checkpoint after this many steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Stage 2: add the vision modality on top of a frozen stage-1 model.
    Train {
        #[command(flatten)]
        plan: PlanArgs,
        /// Stage-1 run directory or checkpoint file.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        name: String,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Continue an interrupted run from its latest checkpoint.
    Resume {
        run_dir: PathBuf,
        /// Must agree with the recorded plan.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage-1 checkpoint for the text-preservation check.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Generate images for a caption.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// For example "a red circle in the top-left".
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        cfg_scale: f64,
        #[arg(long, env = "XFUSION_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "samples")]
        name: String,
    },
    /// Caption an image file, a described scene, or every held-out scene.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 image to caption.
        #[arg(long, conflicts_with = "scene")]
        image: Option<PathBuf>,
        /// Render this caption's scene and caption it back.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Linear probe of vision-stream features.
    Probe {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_parser = parse_mode, default_value = "understanding")]
        mode: ProbeMode,
        #[arg(long, value_parser = parse_attribute, default_value = "shape")]
        attribute: Attribute,
    },
    /// Attention score MACs of one sequence, compared with the single tower.
    Flops {
        #[arg(long, value_parser = parse_variant, default_value = "dual-tower")]
        variant: TowerVariant,
        /// Text positions.
        #[arg(long)]
        n: u64,
        /// Image positions.
        #[arg(long)]
        m: u64,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        vision_dim: Option<usize>,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long)]
        x_fuse: bool,
    },
    /// Train one run per (cell, seed) of an ablation axis.
    Ablate {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_enum)]
        grid: GridAxis,
        /// Seeds 0..N.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Stage-1 run directory or checkpoint; trained first when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Comma-separated subset of cell names.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        #[arg(long)]
        name: Option<String>,
    },
}

fn parse_variant(s: &str) -> Result<TowerVariant, String> {
    TowerVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = TowerVariant::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_mode(s: &str) -> Result<ProbeMode, String> {
    [ProbeMode::Understanding, ProbeMode::Generation]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| "expected understanding or generation".into())
}

fn parse_attribute(s: &str) -> Result<Attribute, String> {
    Attribute::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| "expected shape, color or quadrant".into())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

/// Writes `<dir>/manifest.toml` for one-shot commands, before they compute anything.
fn command_manifest(dir: &Path, command: &str, entries: &[(&str, String)]) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut table: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let run = table.entry("run".into()).or_default();
    run.insert("command".into(), command.into());
    run.insert("version".into(), run::version_stamp());
    let args = table.entry("args".into()).or_default();
    for (k, v) in entries {
        args.insert((*k).into(), v.clone());
    }
    let text = toml::to_string(&table).expect("string tables always serialize");
    store::write_atomic(&dir.join(run::MANIFEST), text.as_bytes())
}

fn report(outcome: Outcome, cli: &Cli) {
    match outcome {
        Outcome::Completed { step } => say(cli, format!("completed at step {step}")),
        Outcome::Interrupted { step } => say(cli, format!("interrupted at step {step}")),
        Outcome::AlreadyComplete { .. } => {}
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let opts = |stop_after: Option<u64>| RunOptions {
        stop_after,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::GenData { plan, count, name } => gen_data(cli, &plan.resolve()?, *count, name),
        Command::PretrainText { plan, name, stop_after } => {
            let p = plan.resolve()?;
            report(run::start_pretrain(&cli.out_dir, name, p, plan.preset, &opts(*stop_after))?, cli);
            Ok(())
        }
        Command::Train {
            plan,
            base,
            name,
            stop_after,
        } => {
            let p = plan.resolve()?;
            let base = base.as_ref().ok_or_else(|| {
                CliError::user(
                    "train needs a stage-1 checkpoint: run `xfusion pretrain-text` and pass its run directory with --base",
                )
            })?;
            report(run::start_train(&cli.out_dir, name, p, plan.preset, base, &opts(*stop_after))?, cli);
            Ok(())
        }
        Command::Resume {
            run_dir,
            overrides,
            stop_after,
        } => {
            report(run::resume(run_dir, overrides, &opts(*stop_after))?, cli);
            Ok(())
        }
        Command::Eval {
            plan,
            checkpoint,
            base,
            name,
        } => eval(cli, &plan.resolve()?, checkpoint, base.as_deref(), name),
        Command::Sample {
            checkpoint,
            caption,
            steps,
            cfg_scale,
            seed,
            count,
            name,
        } => sample(cli, checkpoint, caption, *steps, *cfg_scale, *seed, *count, name),
        Command::Caption { checkpoint, image, scene } => caption(cli, checkpoint, image.as_deref(), scene.as_deref()),
        Command::Probe {
            plan,
            checkpoint,
            layer,
            mode,
            attribute,
        } => {
            let p = plan.resolve()?;
            let model = store::load_model(checkpoint)?;
            multimodal(&model)?;
            let r = linear_probe(&model, *layer, *mode, *attribute, &p.eval.probe)?;
            println!(
                "probe layer {} {} {}: train {:.4} held-out {:.4} (chance {:.4})",
                r.layer,
                r.mode.name(),
                r.attribute.name(),
                r.train_accuracy,
                r.accuracy,
                attribute.chance()
            );
            Ok(())
        }
        Command::Flops {
            variant,
            n,
            m,
            dim,
            vision_dim,
            layers,
            x_fuse,
        } => flops(*variant, *n, *m, *dim, vision_dim.unwrap_or(*dim), *layers, *x_fuse),
        Command::Ablate {
            plan,
            grid,
            seeds,
            base,
            cells,
            name,
        } => ablate(cli, plan, *grid, *seeds, base.as_deref(), cells, name.as_deref()),
    }
}

fn multimodal(model: &Model<f32>) -> CliResult<()> {
    if model.is_multimodal() {
        Ok(())
    } else {
        Err(CliError::user("this command needs a stage-2 (multimodal) checkpoint"))
    }
}

fn gen_data(cli: &Cli, plan: &RunPlan, count: u64, name: &str) -> CliResult<()> {
    let dir = cli.out_dir.join(name);
    command_manifest(
        &dir,
        "gen-data",
        &[
            ("count", count.to_string()),
            ("seed", plan.train.seed.to_string()),
            ("t2i", plan.train.mix.t2i.to_string()),
            ("i2t", plan.train.mix.i2t.to_string()),
        ],
    )?;
    let stream = SampleStream::new(plan.train.mix, plan.train.seed)?;
    let path = dir.join("dataset.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["index", "kind", "shape", "color", "quadrant", "variant", "seed"])?;
    let mut kinds = [0u64; 3];
    for d in stream.iter().take(count as usize) {
        kinds[match d.kind {
            SampleKind::T2I => 0,
            SampleKind::I2T => 1,
            SampleKind::TextOnly => 2,
        }] += 1;
        w.write_record([
            d.index.to_string(),
            d.kind.name().to_string(),
            d.scene.shape.name().to_string(),
            d.scene.color.name().to_string(),
            d.scene.quadrant.name().to_string(),
            d.variant.to_string(),
            d.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let scenes = dir.join("scenes");
    std::fs::create_dir_all(&scenes).map_err(|e| CliError::io(&scenes, e))?;
    let vocab = Vocabulary::new();
    for s in SceneSpec::all() {
        let split = if s.is_held_out() { "held-out" } else { "train" };
        let words = vocab.detokenize(&vocab.caption_of(&s)).replace(' ', "-");
        let p = scenes.join(format!("{:02}-{split}-{words}.ppm", s.index()));
        std::fs::write(&p, encode_ppm(&render_scene(&s), 4)).map_err(|e| CliError::io(&p, e))?;
    }
    say(
        cli,
        format!(
            "{count} samples (t2i {}, i2t {}, text {}) -> {}; 48 scenes -> {}",
            kinds[0],
            kinds[1],
            kinds[2],
            path.display(),
            scenes.display()
        ),
    );
    Ok(())
}

fn eval(cli: &Cli, plan: &RunPlan, checkpoint: &Path, base: Option<&Path>, name: &str) -> CliResult<()> {
    let dir = cli.out_dir.join(name);
    let mut entries = vec![
        ("checkpoint", checkpoint.display().to_string()),
        ("eval", toml::to_string(&plan.eval).expect("eval configs serialize")),
    ];
    if let Some(b) = base {
        entries.push(("base", b.display().to_string()));
    }
    command_manifest(&dir, "eval", &entries)?;
    let model = store::load_model(checkpoint)?;
    let base = base.map(store::load_model).transpose()?;
    let step = match store::load(checkpoint)?.optimizer {
        Some(o) => o.step,
        None => 0,
    };
    let r = xfusion_core::eval::evaluate(&model, base.as_ref(), &plan.eval, step)?;
    let text = toml::to_string(&r).map_err(|e| CliError::Internal(e.to_string()))?;
    store::write_atomic(&dir.join("report.toml"), text.as_bytes())?;
    let row = crate::metrics::MetricsRow::from_report(&r, [0; 3], [0.0; 4], String::new());
    println!("{}", run::summary(&row));
    for p in &r.probes {
        println!(
            "probe layer {} {} {}: {:.4}",
            p.layer,
            p.mode.name(),
            p.attribute.name(),
            p.accuracy
        );
    }
    say(cli, format!("report -> {}", dir.join("report.toml").display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    cli: &Cli,
    checkpoint: &Path,
    caption: &str,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    count: usize,
    name: &str,
) -> CliResult<()> {
    let vocab = Vocabulary::new();
    let tokens = vocab
        .tokenize(caption)
        .ok_or_else(|| CliError::user(format!("`{caption}` uses words outside the vocabulary")))?;
    let dir = cli.out_dir.join(name);
    command_manifest(
        &dir,
        "sample",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("caption", caption.into()),
            ("steps", steps.to_string()),
            ("cfg_scale", cfg_scale.to_string()),
            ("seed", seed.to_string()),
            ("count", count.to_string()),
        ],
    )?;
    let model = store::load_model(checkpoint)?;
    multimodal(&model)?;
    let cfg = SamplerConfig {
        steps,
        guidance: cfg_scale,
    };
    let captions = vec![tokens; count];
    let images = sample_images(&model, &captions, &cfg, &RngStream::new(seed).split("sample-cli"))?;
    let wanted = vocab.parse_caption(&captions[0]).ok();
    for (i, img) in images.iter().enumerate() {
        let p = dir.join(format!("sample-{i:03}.ppm"));
        std::fs::write(&p, encode_ppm(img, 4)).map_err(|e| CliError::io(&p, e))?;
        let read = OracleClassifier.classify(img);
        let desc = read
            .map(|s| vocab.detokenize(&vocab.caption_of(&s)))
            .unwrap_or_else(|| "<blank>".into());
        let verdict = match (wanted, read) {
            (Some(w), Some(r)) if w == r => "match",
            (Some(_), _) => "mismatch",
            (None, _) => "unscored",
        };
        println!("{}: oracle reads \"{desc}\" ({verdict})", p.display());
    }
    Ok(())
}

/// Greedy caption of one clean image.
fn caption_image(model: &Model<f32>, img: &xfusion_core::synth::ImageLatent) -> CliResult<Vec<TokenId>> {
    let vocab = Vocabulary::new();
    let mut seq = assemble(&vocab, SampleKind::I2T, &SceneSpec::from_index(0).expect("scene 0"), false);
    let x = patchify(img, PATCH)?;
    seq.clean = Some(x.clone());
    seq.input = Some(x);
    let eoi = seq.span.expect("i2t has an image").eoi;
    seq.slots.truncate(eoi + 1);
    let mut out = Vec::new();
    for _ in 0..xfusion_core::eval::MAX_CAPTION_TOKENS {
        let next = model.next_tokens(std::slice::from_ref(&seq))?[0];
        if next == TokenId::EOS {
            break;
        }
        out.push(next);
        seq.slots.push(Slot::Text(next));
    }
    Ok(out)
}

fn caption(cli: &Cli, checkpoint: &Path, image: Option<&Path>, scene: Option<&str>) -> CliResult<()> {
    let model = store::load_model(checkpoint)?;
    multimodal(&model)?;
    let vocab = Vocabulary::new();
    let from_text = |text: &str| -> CliResult<SceneSpec> {
        let t = vocab
            .tokenize(text)
            .ok_or_else(|| CliError::user(format!("`{text}` uses words outside the vocabulary")))?;
        vocab
            .parse_caption(&t)
            .map_err(|e| CliError::user(format!("`{text}` is not a caption of the grammar ({e:?})")))
    };
    match (image, scene) {
        (Some(p), _) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let toks = caption_image(&model, &decode_ppm(&bytes)?)?;
            println!("{}", vocab.detokenize(&toks));
        }
        (None, Some(text)) => {
            let spec = from_text(text)?;
            let r = eval_caption(&model, &[spec])?;
            print_captions(&vocab, &[spec], &r);
        }
        (None, None) => {
            let scenes = SceneSpec::held_out_split();
            let r = eval_caption(&model, &scenes)?;
            print_captions(&vocab, &scenes, &r);
            say(cli, format!("caption accuracy {:.4} on {} held-out scenes", r.accuracy, scenes.len()));
        }
    }
    Ok(())
}

fn print_captions(vocab: &Vocabulary, scenes: &[SceneSpec], r: &CaptionEval) {
    for ((s, c), ok) in scenes.iter().zip(&r.captions).zip(&r.correct) {
        println!(
            "{:<40} -> {:<40} {}",
            vocab.detokenize(&vocab.caption_of(s)),
            vocab.detokenize(c),
            if *ok { "ok" } else { "wrong" }
        );
    }
}

fn flops(variant: TowerVariant, n: u64, m: u64, dim: usize, vision_dim: usize, layers: usize, x_fuse: bool) -> CliResult<()> {
    let cfg = ModelConfig {
        layers,
        dim,
        vision_dim,
        heads: 1,
        mlp_hidden: 4 * dim,
        variant,
        x_fuse,
        align_layer: layers.div_ceil(2),
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let r = count_flops(&cfg, n, m);
    let single = count_flops(
        &ModelConfig {
            variant: TowerVariant::SingleTower,
            x_fuse: false,
            vision_dim: dim,
            ..cfg.clone()
        },
        n,
        m,
    );
    println!("score-MACs {}", r.score_macs());
    println!("single-tower score-MACs {}", single.score_macs());
    let (a, b) = (r.score_macs(), single.score_macs());
    if a == b {
        println!("parity: equal");
    } else if b > 0 {
        println!("parity: differs ({:.4}x single-tower)", a as f64 / b as f64);
    }
    println!("total MACs {}", r.total());
    Ok(())
}

fn ablate(
    cli: &Cli,
    plan_args: &PlanArgs,
    axis: GridAxis,
    seeds: u64,
    base: Option<&Path>,
    only: &[String],
    name: Option<&str>,
) -> CliResult<()> {
    let plan = plan_args.resolve()?;
    if seeds == 0 {
        return Err(CliError::user("--seeds must be at least 1"));
    }
    let mut cells = grid::cells(axis, &plan);
    if !only.is_empty() {
        if let Some(bad) = only.iter().find(|c| !cells.iter().any(|x| &x.name == *c)) {
            let names: Vec<_> = cells.iter().map(|c| c.name.as_str()).collect();
            return Err(CliError::user(format!("unknown cell `{bad}`; {} has {}", axis.name(), names.join(", "))));
        }
        cells.retain(|c| only.contains(&c.name));
    }
    let name = name.map(String::from).unwrap_or_else(|| format!("ablate-{}", axis.name()));
    let dir = cli.out_dir.join(&name);
    command_manifest(
        &dir,
        "ablate",
        &[
            ("grid", axis.name().into()),
            ("seeds", seeds.to_string()),
            ("cells", cells.iter().map(|c| c.name.clone()).collect::<Vec<_>>().join(",")),
            ("base", base.map(|b| b.display().to_string()).unwrap_or_default()),
            ("plan", plan.to_toml()),
        ],
    )?;
    let stage1 = match base {
        Some(b) => store::load_model(b)?,
        None => {
            let opts = RunOptions {
                stop_after: None,
                quiet: cli.quiet,
            };
            let stage_dir = dir.join("stage1");
            if !stage_dir.join(run::MANIFEST).exists() {
                run::start_pretrain(&dir, "stage1", plan.clone(), plan_args.preset, &opts)?;
            }
            store::load_model(&stage_dir)?
        }
    };
    let mut runs = Vec::new();
    for cell in &cells {
        for seed in 0..seeds {
            say(cli, format!("cell {} seed {seed}", cell.name));
            let r = grid::run_cell(cell, &stage1, seed, &mut |c, s, row| {
                if !cli.quiet {
                    println!("  {c} seed {s}: {}", run::summary(row));
                }
            });
            if let Some(e) = &r.error {
                eprintln!("  cell {} seed {seed} failed: {e}", cell.name);
            }
            runs.push(r);
        }
    }
    grid::write_report(&dir, axis, &runs)?;
    let index = grid::write_index(&dir)?;
    for metric in ["caption_accuracy", "generation_accuracy"] {
        for (cell, v) in grid::final_medians(&runs, metric) {
            say(cli, format!("{cell:<16} median {metric} {}", v.map(|v| format!("{v:.4}")).unwrap_or("-".into())));
        }
    }
    say(cli, format!("artifacts listed in {}", index.display()));
    Ok(())
}
