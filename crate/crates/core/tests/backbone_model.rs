use jgrp2o::backbone::{BackboneConfig, Hourglass, Stem, StageTrunk};
use jgrp2o::jgr::{GraphPolicy, Topology};
use jgrp2o::layers::{Ctx, Init, ResidualLayout};
use jgrp2o::model::{count_params, JgrP2o, ModelConfig};
use jgrp2o::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn backbone(input: usize, feature: usize, channels: usize, depth: usize, stages: usize) -> BackboneConfig {
    BackboneConfig {
        input_size: input,
        feature_size: feature,
        channels,
        depth,
        stages,
        ..BackboneConfig::default()
    }
}

fn model_cfg(b: BackboneConfig, topology: &str, policy: GraphPolicy) -> ModelConfig {
    ModelConfig {
        backbone: b,
        topology: Topology::builtin(topology).unwrap(),
        policy,
        reasoning: true,
    }
}

fn stem_output(cfg: &BackboneConfig, input: Tensor4<f64>) -> Tensor4<f64> {
    let stem = Stem::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = Init::new(&mut rng);
    stem.register(&mut init).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &init.store, NormMode::Eval);
    let x = ctx.tape.constant(input);
    let y = stem.forward(&mut ctx, x).unwrap();
    tape.value(y).clone()
}

#[test]
fn stem_output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let full = backbone(96, 24, 4, 2, 1);
    assert_eq!(stem_output(&full, random(&mut rng, [1, 96, 96, 1])).dims(), [1, 24, 24, 4]);
    let tiny = backbone(32, 8, 8, 2, 1);
    assert_eq!(stem_output(&tiny, random(&mut rng, [1, 32, 32, 1])).dims(), [1, 8, 8, 8]);
}

#[test]
fn identical_images_give_identical_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(&mut rng, [1, 32, 32, 1]);
    let pair = Tensor4::from_fn([2, 32, 32, 1], |[_, h, w, c]| img.at(0, h, w, c));
    let out = stem_output(&backbone(32, 8, 8, 2, 1), pair);
    assert_eq!(out.item(0), out.item(1));
}

fn hourglass_run(depth: usize) -> (Hourglass, ParamStore<f64>, Tensor4<f64>, Tensor4<f64>) {
    let cfg = backbone(32, 8, 4, depth, 1);
    let hg = Hourglass::new("hg", depth, 4, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = Init::new(&mut rng);
    hg.register(&mut init).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(40), [1, 8, 8, 4]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &init.store, NormMode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let y = hg.forward(&mut ctx, xv).unwrap();
    let out = tape.value(y).clone();
    (hg, init.store, x, out)
}

#[test]
fn hourglass_preserves_shape() {
    for depth in 0..=3 {
        let (hg, _, x, y) = hourglass_run(depth);
        assert_eq!(hg.depth(), depth);
        assert_eq!(y.dims(), x.dims());
    }
    let (hg, store, _, _) = hourglass_run(0);
    assert!(matches!(hg, Hourglass::Leaf(_)));
    assert_eq!(store.count_trainable(), hg.param_count());
}

#[test]
fn skip_branch_receives_gradient() {
    let (hg, mut store, x, _) = hourglass_run(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = random(&mut rng, [1, 8, 8, 4]);
    let loss = |st: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, st, NormMode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let y = hg.forward(&mut ctx, xv).unwrap();
        tape.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let name = "hg/skip/conv3/bias";
    let h = 1e-6;
    let mut fd = 0.0f64;
    for i in 0..4 {
        store.get_mut(name).unwrap().value.data_mut()[i] += h;
        let up = loss(&store);
        store.get_mut(name).unwrap().value.data_mut()[i] -= 2.0 * h;
        let down = loss(&store);
        store.get_mut(name).unwrap().value.data_mut()[i] += h;
        fd += ((up - down) / (2.0 * h)).abs();
    }
    assert!(fd > 1e-3, "skip bias gradient {fd}");
}

#[test]
fn zero_previous_stage_adds_only_the_remap_bias() {
    let cfg = backbone(32, 8, 4, 1, 2);
    let trunk = StageTrunk::new(1, &cfg);
    let mut init_rng = ChaCha8Rng::seed_from_u64(6);
    let mut init = Init::new(&mut init_rng);
    trunk.register(&mut init).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let bias = Tensor4::from_fn([1, 1, 1, 4], |_| rng.random_range(-1.0..1.0));
    init.store.get_mut("stage2/remap/bias").unwrap().value = bias.clone();
    let stem = random(&mut rng, [2, 8, 8, 4]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &init.store, NormMode::Eval);
    let sv = ctx.tape.constant(stem.clone());
    let zero = ctx.tape.constant(Tensor4::zeros([2, 8, 8, 4]));
    let y = trunk.stage_input(&mut ctx, sv, zero).unwrap();
    let y = tape.value(y);
    assert_eq!(y.dims(), [2, 8, 8, 4]);
    for b in 0..2 {
        for h in 0..8 {
            for w in 0..8 {
                for c in 0..4 {
                    assert_eq!(y.at(b, h, w, c), stem.at(b, h, w, c) + bias.data()[c]);
                }
            }
        }
    }
    assert!(StageTrunk::new(0, &cfg).remap.is_none());
}

#[test]
fn two_stage_forward_is_deterministic_and_finite() {
    let model = JgrP2o::new(model_cfg(backbone(32, 8, 8, 2, 2), "chain4", GraphPolicy::Skeleton)).unwrap();
    let store = model.init(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = random(&mut rng, [2, 32, 32, 1]);
    let grid = random(&mut rng, [2, 8, 8, 3]);
    let run = || {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, NormMode::Eval);
        let x = ctx.tape.constant(input.clone());
        let outs = model.forward(&mut ctx, x, &grid).unwrap();
        outs.iter()
            .map(|o| {
                let off = tape.value(o.offsets);
                // Offset maps share the feature-map resolution.
                assert_eq!(off.dims(), [2, 8, 8, 12]);
                (off.clone(), tape.value(o.pose).clone())
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 2);
    for (off, pose) in &a {
        assert!(off.is_finite() && pose.is_finite());
    }
    assert_eq!(a, run());
}

/// Per-layer parameter arithmetic, written independently of the layer code.
fn hand_count(cfg: &ModelConfig) -> usize {
    let b = &cfg.backbone;
    let c = b.channels;
    let n = cfg.joints();
    let conv = |k: usize, ci: usize, co: usize, bias: bool| k * k * ci * co + if bias { co } else { 0 };
    let bn = |ch: usize| 2 * ch;
    let residual = |ci: usize, co: usize| {
        let body = match b.residual {
            ResidualLayout::Bottleneck => {
                let m = (co / 2).max(1);
                bn(ci) + conv(1, ci, m, false) + bn(m) + conv(3, m, m, false) + bn(m) + conv(1, m, co, true)
            }
            ResidualLayout::Basic => bn(ci) + conv(3, ci, co, false) + bn(co) + conv(3, co, co, true),
        };
        body + if ci != co { conv(1, ci, co, true) } else { 0 }
    };
    let half = (c / 2).max(1);
    let levels = (b.input_size / b.feature_size).trailing_zeros() as usize;
    let stem = conv(5, 1, half, false) + bn(half) + residual(half, c) + levels * residual(c, c);
    let trunk = (3 * b.depth + 1) * residual(c, c) + residual(c, c) + conv(1, c, c, false) + bn(c);
    let mut jgr = conv(1, c, n, false) + conv(1, c, c, true) + c * c;
    jgr += conv(1, c, c, false) + bn(c) + conv(1, 2 * c, c, false) + bn(c);
    jgr += match cfg.policy {
        GraphPolicy::Skeleton => 0,
        GraphPolicy::Similarity => 2 * c * c,
        GraphPolicy::Parameterized => n * n,
    };
    let head = conv(1, c, 3 * n, true);
    let remap = conv(1, c, c, true);
    stem + b.stages * (trunk + jgr + head) + (b.stages - 1) * remap
}

#[test]
fn counts_match_per_layer_arithmetic() {
    let tiny = model_cfg(backbone(32, 8, 8, 1, 1), "chain4", GraphPolicy::Skeleton);
    assert_eq!(count_params(&tiny).unwrap(), hand_count(&tiny));
    for policy in [GraphPolicy::Skeleton, GraphPolicy::Similarity, GraphPolicy::Parameterized] {
        for (depth, stages) in [(0, 1), (2, 2), (1, 3)] {
            let cfg = model_cfg(backbone(32, 8, 6, depth, stages), "synth", policy);
            assert_eq!(count_params(&cfg).unwrap(), hand_count(&cfg), "{policy} {depth} {stages}");
        }
    }
    let mut basic = backbone(32, 8, 8, 2, 2);
    basic.residual = ResidualLayout::Basic;
    let cfg = model_cfg(basic, "chain4", GraphPolicy::Skeleton);
    assert_eq!(count_params(&cfg).unwrap(), hand_count(&cfg));
}

#[test]
fn initialized_store_matches_the_count() {
    let cfg = model_cfg(backbone(32, 8, 8, 2, 2), "chain4", GraphPolicy::Parameterized);
    let model = JgrP2o::new(cfg).unwrap();
    assert_eq!(model.init(0).unwrap().count_trainable(), model.param_count());
    assert_eq!(model.shapes().unwrap().count_trainable(), model.param_count());
    let total: usize = model.param_breakdown().iter().map(|(_, n)| n).sum();
    assert_eq!(total, model.param_count());
}

#[test]
fn a_second_stage_adds_exactly_one_stage() {
    let one = JgrP2o::new(model_cfg(backbone(96, 24, 136, 2, 1), "synth", GraphPolicy::Skeleton)).unwrap();
    let two = JgrP2o::new(model_cfg(backbone(96, 24, 136, 2, 2), "synth", GraphPolicy::Skeleton)).unwrap();
    let s = &two.stages[1];
    let stage = s.trunk.param_count() + s.jgr.param_count() + s.head.param_count();
    assert_eq!(two.param_count() - one.param_count(), stage);
}

#[test]
fn full_size_budget() {
    let two = count_params(&model_cfg(BackboneConfig::default(), "synth", GraphPolicy::Skeleton)).unwrap();
    assert!((1_200_000..=1_600_000).contains(&two), "{two}");
    let one = count_params(&model_cfg(backbone(96, 24, 136, 2, 1), "synth", GraphPolicy::Skeleton)).unwrap();
    assert!((600_000..=900_000).contains(&one), "{one}");
}

#[test]
fn invalid_backbones_are_rejected() {
    assert!(backbone(32, 8, 8, 2, 0).validate().is_err());
    assert!(backbone(32, 12, 8, 2, 1).validate().is_err());
    assert!(backbone(48, 8, 8, 2, 1).validate().is_err());
    assert!(backbone(32, 8, 8, 4, 1).validate().is_err());
    assert!(backbone(32, 8, 8, 3, 1).validate().is_ok());
}
