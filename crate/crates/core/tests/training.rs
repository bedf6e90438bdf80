use std::collections::BTreeSet;

use xfusion_core::autodiff::Tape;
use xfusion_core::eval::{eval_text_preservation, text_probe_set};
use xfusion_core::model::{Model, ModelConfig, TowerVariant};
use xfusion_core::synth::MixRatio;
use xfusion_core::train::{pretrain_text, Stage, TrainPlan, Trainer};

fn small(variant: TowerVariant, x_fuse: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 16,
        vision_dim: 16,
        heads: 2,
        mlp_hidden: 32,
        variant,
        x_fuse,
        align_layer: 1,
        ..ModelConfig::default()
    }
}

fn plan(stage: Stage, steps: u64, seed: u64) -> TrainPlan {
    let mut p = match stage {
        Stage::TextPretrain => TrainPlan::text_pretrain(),
        Stage::Multimodal => TrainPlan::default(),
    };
    p.steps = steps;
    p.batch_size = 6;
    p.optim.peak_lr = 3e-3;
    p.optim.warmup_steps = 10;
    p.seed = seed;
    p
}

fn base(cfg: &ModelConfig) -> Model<f32> {
    pretrain_text(cfg, &plan(Stage::TextPretrain, 40, 0), |_, _| {}).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Names of trainable parameters that never saw a nonzero gradient over `steps` steps.
fn dead_parameters(cfg: ModelConfig, alignment: bool, steps: u64) -> BTreeSet<String> {
    let stage1 = base(&cfg);
    let model = Model::multimodal(cfg, stage1.params(), 3).unwrap();
    let mut p = plan(Stage::Multimodal, steps, 5);
    p.alignment = alignment;
    p.noise.t_max_i2t = 0.5;
    let mut trainer = Trainer::new(p, model).unwrap();
    let mut alive = BTreeSet::new();
    while !trainer.is_done() {
        let samples = trainer.samples_at(trainer.step_count()).unwrap();
        let mut tape = Tape::new();
        let (_, total) = trainer.losses(&mut tape, &samples).unwrap();
        let grads = tape.backward(total.unwrap()).unwrap();
        let mut ps = trainer.model().params().clone();
        ps.zero_grad();
        grads.accumulate_into(&mut ps).unwrap();
        for (_, p) in ps.iter() {
            if p.grad.as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                alive.insert(p.name.clone());
            }
        }
        trainer.train_step().unwrap();
    }
    trainer
        .model()
        .params()
        .iter()
        .filter(|(_, p)| !p.frozen && !alive.contains(&p.name))
        .map(|(_, p)| p.name.clone())
        .collect()
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    for (variant, x_fuse) in [
        (TowerVariant::SingleTower, false),
        (TowerVariant::GatedTower, false),
        (TowerVariant::DualProjection, false),
        (TowerVariant::DualTower, false),
        (TowerVariant::DualTower, true),
    ] {
        let dead = dead_parameters(small(variant, x_fuse), true, 4);
        assert!(dead.is_empty(), "{variant:?} x_fuse={x_fuse}: {dead:?}");
    }
}

#[test]
fn text_stack_is_preserved_except_for_single_tower() {
    let probes = text_probe_set();
    for variant in TowerVariant::ALL {
        let cfg = small(variant, false);
        let stage1 = base(&cfg);
        let model = Model::multimodal(cfg.clone(), stage1.params(), 2).unwrap();
        let mut trainer = Trainer::new(plan(Stage::Multimodal, 30, 1), model).unwrap();
        let frozen = trainer.model().params().frozen_digest();
        let mut totals = Vec::new();
        while !trainer.is_done() {
            let b = trainer.train_step().unwrap();
            let w = b.weights;
            assert!((b.total - (w.ar * b.ar + w.dm * b.dm + w.align * b.align)).abs() <= 1e-7);
            totals.push(b.total);
        }
        trainer.check_frozen().unwrap();
        assert_eq!(trainer.model().params().frozen_digest(), frozen);
        let grown = Model::multimodal(cfg, stage1.params(), 2).unwrap();
        let div = eval_text_preservation(trainer.model(), &grown, &probes).unwrap();
        match variant {
            TowerVariant::SingleTower => {
                assert!(trainer.model().params().frozen_names().is_empty());
                assert!(div > 1e-3, "single tower divergence {div}");
            }
            TowerVariant::DualTower => assert_eq!(div, 0.0),
            _ => assert!(div <= 1e-6, "{variant:?} divergence {div}"),
        }
    }
}

#[test]
fn alignment_loss_falls_on_a_fixed_batch() {
    let cfg = small(TowerVariant::DualTower, false);
    let stage1 = base(&cfg);
    let checkpoints = [0u64, 100, 200, 300, 400, 500];
    let mut curves = Vec::new();
    for seed in 0..3 {
        let model = Model::multimodal(cfg.clone(), stage1.params(), seed).unwrap();
        let mut p = plan(Stage::Multimodal, 500, seed);
        p.alignment = true;
        p.mix = MixRatio { t2i: 0.5, i2t: 0.5 };
        let mut trainer = Trainer::new(p, model).unwrap();
        let probe = trainer.samples_at(10_000).unwrap();
        let mut curve = Vec::new();
        loop {
            if checkpoints.contains(&trainer.step_count()) {
                let mut tape = Tape::new();
                let (b, _) = trainer.losses(&mut tape, &probe).unwrap();
                assert!(b.align_present && (0.0..=2.0).contains(&b.align));
                curve.push(b.align);
            }
            if trainer.is_done() {
                break;
            }
            trainer.train_step().unwrap();
        }
        curves.push(curve);
    }
    let med: Vec<f64> = (0..checkpoints.len()).map(|i| median(curves.iter().map(|c| c[i]).collect())).collect();
    assert!(med.windows(2).all(|w| w[1] <= w[0]), "median L_align {med:?}");
}

#[test]
fn text_pretraining_refuses_multimodal_models() {
    let cfg = small(TowerVariant::DualTower, false);
    let stage1 = base(&cfg);
    let grown = Model::multimodal(cfg.clone(), stage1.params(), 0).unwrap();
    assert!(Trainer::new(plan(Stage::TextPretrain, 1, 0), grown).is_err());
    assert!(Trainer::new(plan(Stage::Multimodal, 1, 0), stage1).is_err());
}
