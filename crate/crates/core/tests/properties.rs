use std::collections::BTreeSet;
use std::rc::Rc;

use proptest::prelude::*;
use xfusion_core::autodiff::{AttentionLayout, AttnSegment, Tape};
use xfusion_core::checkpoint::Checkpoint;
use xfusion_core::flow::{draw_timestep, make_flow_sample, FlowSample, NoisePolicy};
use xfusion_core::model::{count_flops, ModelConfig, TowerVariant};
use xfusion_core::optim::{AdamWConfig, OptimizerState};
use xfusion_core::synth::{
    assemble, patchify, render_scene, unpatchify, MixRatio, SampleKind, SampleStream, SceneSpec, TokenId, Vocabulary,
};
use xfusion_core::train::{loss_align, LossBreakdown, LossWeights};
use xfusion_core::{ParameterSet, RngStream, Tensor};

fn flops_config(variant: TowerVariant, x_fuse: bool, d: usize) -> ModelConfig {
    ModelConfig {
        variant,
        x_fuse,
        dim: d,
        vision_dim: d,
        heads: 1,
        layers: 1,
        ..ModelConfig::default()
    }
}

fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut RngStream::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn score_macs_match_single_tower(n in 0u64..400, m in 0u64..400, d in 1usize..512) {
        let single = count_flops(&flops_config(TowerVariant::SingleTower, false, d), n, m);
        let dual = count_flops(&flops_config(TowerVariant::DualTower, false, d), n, m);
        let fused = count_flops(&flops_config(TowerVariant::DualTower, true, d), n, m);
        let s = n + m;
        prop_assert_eq!(single.score_macs(), s * s * d as u64);
        prop_assert_eq!(dual.score_macs(), single.score_macs());
        prop_assert_eq!(fused.score_macs(), 2 * single.score_macs());
        if m == 0 {
            prop_assert_eq!(dual.vision_score_macs(), 0);
        }
    }

    #[test]
    fn tensor_length_is_the_product_of_extents(shape in prop::collection::vec(0usize..5, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f32>::new(&shape, vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(&shape, vec![0.0; n + extra]).is_err());
        prop_assert_eq!(Tensor::<f32>::zeros(&shape).len(), n);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..80.0, seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[rows, cols], seed, scale));
        let p = tape.softmax_rows(x);
        for r in tape.value(p).chunks(cols) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_with_every_query_equals_sliced_full(len in 1usize..7, img in 0usize..4, seed in any::<u64>()) {
        let heads = 2;
        let d = 4;
        let span = (img > 0 && img <= len).then(|| (len - img, len));
        let seg = |q: Vec<usize>| AttentionLayout {
            heads,
            segments: vec![AttnSegment { kv_offset: 0, kv_len: len, q_offset: 0, q_positions: q, bidirectional: span }],
        };
        let full = Rc::new(seg((0..len).collect()));
        let odd: Vec<usize> = (0..len).filter(|p| p % 2 == 1).collect();
        let sub = Rc::new(seg(odd.clone()));
        let q = randn(&[len, d], seed, 1.0);
        let k = randn(&[len, d], seed ^ 1, 1.0);
        let v = randn(&[len, d], seed ^ 2, 1.0);
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k), tape.constant(v));
        let a = tape.attention(qv, kv, vv, &full).unwrap();
        let rows: Vec<f64> = odd.iter().flat_map(|&p| q.row(p).to_vec()).collect();
        let qs = tape.constant(Tensor::new(&[odd.len(), d], rows).unwrap());
        let b = tape.attention(qs, kv, vv, &sub).unwrap();
        let full_rows = tape.value(a).to_vec();
        for (i, &p) in odd.iter().enumerate() {
            for j in 0..d {
                prop_assert!((tape.value(b)[i * d + j] - full_rows[p * d + j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn flow_endpoints_and_reconstruction(scene in 0usize..48, t in 0.0f64..=1.0, seed in any::<u64>()) {
        let x0 = patchify(&render_scene(&SceneSpec::from_index(scene).unwrap()), 2).unwrap();
        let mut rng = RngStream::new(seed);
        let s = make_flow_sample(&x0, t, &mut rng).unwrap();
        let at0 = FlowSample::from_parts(s.x0.clone(), s.eps.clone(), 0.0).unwrap();
        let at1 = FlowSample::from_parts(s.x0.clone(), s.eps.clone(), 1.0).unwrap();
        prop_assert_eq!(&at0.xt, &s.x0);
        prop_assert_eq!(&at1.xt, &s.eps);
        prop_assert_eq!(&at0.v_target, &at1.v_target);
        for ((&xt, &v), &x) in s.xt.data().iter().zip(s.v_target.data()).zip(s.x0.data()) {
            prop_assert!((xt - t as f32 * v - x).abs() <= 1e-6);
        }
    }

    #[test]
    fn timesteps_respect_the_policy(t_max in 0.0f64..=1.0, seed in any::<u64>()) {
        let policy = NoisePolicy { t_max_i2t: t_max };
        let mut rng = RngStream::new(seed);
        for _ in 0..200 {
            let i2t = draw_timestep(SampleKind::I2T, &policy, &mut rng);
            prop_assert!(i2t >= 0.0 && i2t <= t_max);
            if t_max == 0.0 {
                prop_assert_eq!(i2t, 0.0);
                prop_assert!(!policy.supervises_image(SampleKind::I2T, i2t));
            }
            let t2i = draw_timestep(SampleKind::T2I, &policy, &mut rng);
            prop_assert!(t2i > 0.0 && t2i <= 1.0);
            prop_assert_eq!(draw_timestep(SampleKind::TextOnly, &policy, &mut rng), 0.0);
        }
    }

    #[test]
    fn alignment_loss_is_bounded(n in 1usize..6, dv in 1usize..6, dt in 1usize..6, scale in 0.01f64..100.0, seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(randn(&[n, dv], seed, scale));
        let w = tape.constant(randn(&[dv, dt], seed ^ 5, 1.0));
        let f = tape.constant(randn(&[n, dt], seed ^ 9, 1.0));
        let l = loss_align(&mut tape, h, w, f).unwrap();
        let v = tape.scalar(l);
        prop_assert!((0.0..=2.0).contains(&v), "{}", v);
    }

    #[test]
    fn loss_total_is_the_weighted_sum(
        ar in prop::option::of(0.0f64..20.0),
        dm in prop::option::of(0.0f64..20.0),
        al in prop::option::of(0.0f64..2.0),
    ) {
        let w = LossWeights::default();
        let b = LossBreakdown::new(w, ar, dm, al);
        let expect = w.ar * ar.unwrap_or(0.0) + w.dm * dm.unwrap_or(0.0) + w.align * al.unwrap_or(0.0);
        prop_assert!((b.total - expect).abs() <= 1e-7);
        prop_assert!(b.is_finite() && b.ar >= 0.0 && b.dm >= 0.0 && b.align >= 0.0);
        prop_assert_eq!(b.dm_present, dm.is_some());
        if dm.is_none() {
            prop_assert_eq!(b.dm, 0.0);
        }
    }

    #[test]
    fn parser_accepts_only_canonical_captions(
        base in 0usize..48,
        edits in prop::collection::vec((0usize..8, any::<prop::sample::Index>()), 0..3),
        len in 0usize..=8,
    ) {
        let v = Vocabulary::new();
        let alphabet = v.grammar_tokens();
        let canonical: BTreeSet<Vec<TokenId>> = SceneSpec::all().iter().map(|s| v.caption_of(s)).collect();
        let mut toks = v.caption_of(&SceneSpec::from_index(base).unwrap());
        toks.resize(len.max(toks.len()), alphabet[0]);
        toks.truncate(len);
        for (pos, tok) in edits {
            if pos < toks.len() {
                toks[pos] = *tok.get(&alphabet);
            }
        }
        match v.parse_caption(&toks) {
            Ok(spec) => prop_assert_eq!(v.caption_of(&spec), toks),
            Err(_) => prop_assert!(!canonical.contains(&toks)),
        }
    }

    #[test]
    fn draws_are_pure_and_keep_held_out_pairs_out(seed in any::<u64>(), index in 0u64..1_000_000) {
        let s = SampleStream::new(MixRatio::default(), seed).unwrap();
        let a = s.draw(index);
        prop_assert_eq!(a, SampleStream::new(MixRatio::default(), seed).unwrap().draw(index));
        if a.kind != SampleKind::TextOnly {
            prop_assert!(!a.scene.is_held_out());
        }
        let v = Vocabulary::new();
        let seq = assemble(&v, a.kind, &a.scene, a.variant);
        prop_assert!(seq.validate().is_ok());
    }

    #[test]
    fn patchify_round_trips(scene in 0usize..48) {
        let img = render_scene(&SceneSpec::from_index(scene).unwrap());
        prop_assert_eq!(unpatchify(&patchify(&img, 2).unwrap(), 2).unwrap(), img);
    }

    #[test]
    fn warmup_schedule(peak in 1e-6f64..1.0, warmup in 0u64..500, step in 1u64..2000) {
        let c = AdamWConfig { peak_lr: peak, warmup_steps: warmup, ..AdamWConfig::default() };
        let lr = c.lr_at(step);
        prop_assert!(lr <= peak);
        if step <= warmup {
            prop_assert!((lr - peak * step as f64 / warmup as f64).abs() <= 1e-15);
        }
    }

    #[test]
    fn frozen_digest_survives_optimizer_steps(steps in 1usize..6, seed in any::<u64>()) {
        let mut ps = ParameterSet::<f32>::new();
        let mut rng = RngStream::new(seed);
        for (i, shape) in [[3usize, 4], [4, 2], [1, 5]].iter().enumerate() {
            ps.insert(&format!("p{i}"), Tensor::randn(shape, 1.0, &mut rng)).unwrap();
        }
        ps.set_frozen("p1", true).unwrap();
        let frozen = ps.frozen_digest();
        let mut opt = OptimizerState::new(AdamWConfig { peak_lr: 0.1, weight_decay: 0.1, ..AdamWConfig::default() });
        for _ in 0..steps {
            let ids: Vec<_> = ps.iter().map(|(id, p)| (id, p.value.len())).collect();
            for (id, n) in ids {
                let g: Vec<f32> = rng.normal_vec(n, 1.0);
                let _ = ps.accumulate_grad(id, &g);
            }
            opt.step(&mut ps).unwrap();
            ps.zero_grad();
        }
        prop_assert_eq!(ps.frozen_digest(), frozen);
        prop_assert!(!opt.moments.contains_key("p1"));
        prop_assert_eq!(opt.moments.len(), 2);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5),
        seed in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut ps = ParameterSet::<f32>::new();
        let mut rng = RngStream::new(seed);
        for (i, s) in shapes.iter().enumerate() {
            ps.insert(&format!("w.{i}"), Tensor::randn(s, 1.0, &mut rng)).unwrap();
        }
        ps.set_frozen("w.0", true).unwrap();
        let mut ck = Checkpoint::new(ps);
        ck.meta.insert("note".into(), "x y".into());
        let bytes = ck.encode();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        prop_assert_eq!(back.params.full_digest(), ck.params.full_digest());
        prop_assert_eq!(back.params.frozen_names(), ck.params.frozen_names());
        prop_assert_eq!(&back, &ck);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x40;
        prop_assert!(Checkpoint::<f32>::decode(&bad).is_err());
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = RngStream::new(seed).split("replay");
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true);
            let b = tape.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c);
            let l = tape.sum(s);
            let l = tape.mean(l);
            let g = tape.backward(l).unwrap();
            g.wrt(a).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn every_assembled_sequence_is_valid() {
    let v = Vocabulary::new();
    for s in SceneSpec::all() {
        for kind in [SampleKind::T2I, SampleKind::I2T, SampleKind::TextOnly] {
            for variant in [false, true] {
                let seq = assemble(&v, kind, &s, variant);
                seq.validate().unwrap();
                assert_eq!(seq.span.is_some(), kind != SampleKind::TextOnly);
            }
        }
    }
}

#[test]
fn mixing_ratio_and_noise_policy_over_ten_thousand_draws() {
    let s = SampleStream::new(MixRatio::default(), 3).unwrap();
    let t2i = s.iter().take(10_000).filter(|d| d.kind == SampleKind::T2I).count() as f64 / 1e4;
    assert!((t2i - 2.0 / 3.0).abs() <= 0.02, "{t2i}");
    let policy = NoisePolicy { t_max_i2t: 0.5 };
    let mut rng = RngStream::new(8);
    let ts: Vec<f64> = (0..10_000).map(|_| draw_timestep(SampleKind::I2T, &policy, &mut rng)).collect();
    let mean = ts.iter().sum::<f64>() / ts.len() as f64;
    assert!(ts.iter().all(|&t| t <= 0.5));
    assert!((mean - 0.25).abs() <= 0.01, "{mean}");
}
