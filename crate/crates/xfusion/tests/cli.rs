use std::path::Path;
use std::process::Command;

use xfusion::cli::main_with_args;
use xfusion::metrics;
use xfusion::store;
use xfusion_core::params::hex;

const TINY: [&str; 16] = [
    "--preset",
    "quick",
    "--set",
    "model.layers=1",
    "--set",
    "model.align_layer=1",
    "--set",
    "pretrain.steps=12",
    "--set",
    "pretrain.eval_every=6",
    "--set",
    "train.steps=12",
    "--set",
    "train.eval_every=4",
    "--set",
    "eval.sampler.steps=3",
];

fn xf(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["xfusion", "--quiet", "--out-dir", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    main_with_args(argv)
}

fn with_tiny<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    let mut v = cmd.to_vec();
    v.extend_from_slice(&TINY);
    v
}

fn stage1(out: &Path) {
    assert_eq!(xf(out, &with_tiny(&["pretrain-text"])), 0);
}

fn digest(path: &Path) -> String {
    hex(&store::load(path).unwrap().params.full_digest())
}

#[test]
fn flops_command_reports_parity() {
    let out = Command::new(env!("CARGO_BIN_EXE_xfusion"))
        .args(["flops", "--variant", "dual-tower", "--n", "4", "--m", "4", "--dim", "8"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("score-MACs 512\n"), "{text}");
    assert!(text.contains("parity: equal"), "{text}");
    let out = Command::new(env!("CARGO_BIN_EXE_xfusion"))
        .args(["flops", "--x-fuse", "--n", "4", "--m", "4", "--dim", "8"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("score-MACs 1024\n") && text.contains("2.0000x"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_xfusion");
    let code = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["train"]), Some(1));
    assert_eq!(code(&["pretrain-text", "--set", "train.nonsense=1"]), Some(1));
    assert_eq!(code(&["flops", "--variant", "quad-tower", "--n", "1", "--m", "1", "--dim", "8"]), Some(1));
    assert_eq!(code(&["sample", "--checkpoint", "missing.ckpt", "--caption", "a red square in the top-left"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--quiet", "--out-dir", dir.path().to_str().unwrap(), "pretrain-text"];
    args.extend_from_slice(&TINY);
    let status = Command::new(env!("CARGO_BIN_EXE_xfusion"))
        .args(&args)
        .env("XFUSION_SEED", "41")
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = std::fs::read_to_string(dir.path().join("stage1/manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 41"), "{manifest}");
}

#[test]
fn interrupted_and_resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stage1(out);
    let base = out.join("stage1");
    let base = base.to_str().unwrap();
    assert_eq!(xf(out, &with_tiny(&["train", "--base", base, "--name", "whole"])), 0);
    assert_eq!(xf(out, &with_tiny(&["train", "--base", base, "--name", "again"])), 0);
    assert_eq!(
        xf(out, &with_tiny(&["train", "--base", base, "--name", "split", "--stop-after", "6"])),
        0
    );
    let split = out.join("split");
    assert!(!split.join("checkpoints/final.ckpt").exists());
    assert_eq!(metrics::read(&split.join("metrics.csv")).unwrap().len(), 1);
    assert_eq!(xf(out, &["resume", split.to_str().unwrap()]), 0);

    let csv = |name: &str| std::fs::read(out.join(name).join("metrics.csv")).unwrap();
    assert_eq!(csv("whole"), csv("again"), "repeated run must be byte-identical");
    assert_eq!(csv("whole"), csv("split"), "resumed run must be byte-identical");
    assert_eq!(metrics::read(&out.join("whole/metrics.csv")).unwrap().len(), 3);
    let fin = |name: &str| digest(&out.join(name).join("checkpoints/final.ckpt"));
    assert_eq!(fin("whole"), fin("split"));

    // Completed runs are left alone; changed plans are refused.
    assert_eq!(xf(out, &["resume", split.to_str().unwrap()]), 0);
    assert_eq!(csv("whole"), csv("split"));
    assert_eq!(xf(out, &["resume", split.to_str().unwrap(), "--set", "train.steps=99"]), 1);
    assert_eq!(xf(out, &["resume", split.to_str().unwrap(), "--set", "train.steps=12"]), 0);
    // The same name cannot be reused.
    assert_eq!(xf(out, &with_tiny(&["train", "--base", base, "--name", "whole"])), 1);
}

#[test]
fn corrupted_checkpoint_blocks_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stage1(out);
    let base = out.join("stage1");
    assert_eq!(
        xf(out, &with_tiny(&["train", "--base", base.to_str().unwrap(), "--stop-after", "5"])),
        0
    );
    let ck = out.join("train/checkpoints/step-0000005.ckpt");
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 100);
    std::fs::write(&ck, bytes).unwrap();
    assert_eq!(xf(out, &["resume", out.join("train").to_str().unwrap()]), 1);
}

#[test]
fn mismatched_base_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stage1(out);
    let mut args = with_tiny(&["train", "--base", "stage1-missing"]);
    assert_eq!(xf(out, &args), 1);
    let base = out.join("stage1");
    args = with_tiny(&["train", "--base", base.to_str().unwrap(), "--set", "model.dim=32"]);
    assert_eq!(xf(out, &args), 1);
    assert!(!out.join("train").exists());
}

#[test]
fn one_shot_commands_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(xf(out, &["gen-data", "--count", "300", "--seed", "3"]), 0);
    let data = std::fs::read_to_string(out.join("data/dataset.csv")).unwrap();
    assert_eq!(data.lines().count(), 301);
    assert!(data.starts_with("index,kind,shape,color,quadrant,variant,seed\n"));
    assert_eq!(std::fs::read_dir(out.join("data/scenes")).unwrap().count(), 48);
    assert!(out.join("data/manifest.toml").exists());

    stage1(out);
    let base = out.join("stage1");
    assert_eq!(xf(out, &with_tiny(&["train", "--base", base.to_str().unwrap()])), 0);
    let run = out.join("train");
    let ck = run.to_str().unwrap();
    for f in ["manifest.toml", "model_card.toml", "metrics.csv", "plots/l_dm.svg", "plots/caption_accuracy.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(run.join("samples")).unwrap().count(), 12);

    assert_eq!(
        xf(out, &["sample", "--checkpoint", ck, "--caption", "a red square in the top-left", "--steps", "2", "--count", "2"]),
        0
    );
    assert!(out.join("samples/sample-001.ppm").exists());
    assert_eq!(xf(out, &["sample", "--checkpoint", ck, "--caption", "a purple blob"]), 1);
    assert_eq!(xf(out, &["caption", "--checkpoint", ck, "--scene", "a red square in the top-left"]), 0);
    let img = std::fs::read_dir(out.join("data/scenes")).unwrap().next().unwrap().unwrap().path();
    assert_eq!(xf(out, &["caption", "--checkpoint", ck, "--image", img.to_str().unwrap()]), 0);
    assert_eq!(
        xf(out, &["probe", "--checkpoint", ck, "--layer", "1", "--set", "eval.probe.epochs=5"]),
        0
    );
    assert_eq!(xf(out, &["probe", "--checkpoint", ck, "--layer", "7"]), 1);
    assert_eq!(
        xf(
            out,
            &with_tiny(&["eval", "--checkpoint", ck, "--base", base.to_str().unwrap(), "--set", "eval.probe_layers=[1]", "--set", "eval.probe.epochs=5"])
        ),
        0
    );
    let report = std::fs::read_to_string(out.join("eval/report.toml")).unwrap();
    assert!(report.contains("text_divergence = 0.0"), "{report}");
    assert_eq!(xf(out, &["caption", "--checkpoint", base.to_str().unwrap()]), 1);
}

#[test]
fn ablation_grid_writes_rows_plots_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let args = with_tiny(&["ablate", "--grid", "noise", "--seeds", "2", "--cells", "noise-0,noise-0.5"]);
    assert_eq!(xf(out, &args), 0);
    let g = out.join("ablate-noise");
    let csv = std::fs::read_to_string(g.join("noise.csv")).unwrap();
    // 2 cells x 2 seeds x 3 evaluations, plus the header.
    assert_eq!(csv.lines().count(), 13, "{csv}");
    assert!(g.join("noise/noise-0.5/caption_accuracy.svg").exists());
    assert!(g.join("noise/summary.csv").exists());
    let index = std::fs::read_to_string(g.join("index.txt")).unwrap();
    assert!(index.lines().any(|l| l == "noise.csv"));
    assert!(index.lines().any(|l| l == "noise/noise-0/generation_accuracy.svg"));
    assert!(index.lines().any(|l| l == "manifest.toml"));
    assert_eq!(xf(out, &["ablate", "--grid", "noise", "--cells", "noise-9"]), 1);
}
