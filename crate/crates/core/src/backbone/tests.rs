use super::*;
use crate::cost::count_params;
use crate::probes::{grad_check, GradCheckTarget};
use crate::tensor::Dense;

fn tiny(fusion: OperatorKind) -> BackboneConfig {
    BackboneConfig {
        depth: 3,
        stages: vec![StageSpec {
            channels: 4,
            blocks: 1,
        }],
        fusion,
        seed: 5,
        height: 8,
        width: 8,
        kernel_size: 3,
        inflate: InflateOptions::default(),
    }
}

fn two_stage(fusion: OperatorKind) -> BackboneConfig {
    BackboneConfig {
        stages: vec![
            StageSpec {
                channels: 8,
                blocks: 2,
            },
            StageSpec {
                channels: 8,
                blocks: 1,
            },
        ],
        ..tiny(fusion)
    }
}

fn random_input(cfg: &BackboneConfig, seed: u64) -> Tensor4 {
    let mut rng = SeededRng::new(seed);
    Tensor4::from_fn([1, cfg.depth, cfg.height, cfg.width], |_| {
        rng.uniform(-1.0, 1.0)
    })
    .unwrap()
}

#[test]
fn parameter_count_adds_up() {
    let cfg = tiny(OperatorKind::NoFusion);
    let b = build(&cfg).unwrap();
    let layer = cfg.fusion_layers()[0];
    let fusion = count_params(OperatorKind::NoFusion, &layer).unwrap() as usize;
    // bias 4, unify 4x4, collapse 4x4x3
    assert_eq!(b.param_count(), fusion + 4 + 16 + 48);
    assert_eq!(fusion, 4 * 9);
}

#[test]
fn build_is_deterministic() {
    let cfg = two_stage(OperatorKind::A3d);
    let (a, b) = (build(&cfg).unwrap(), build(&cfg).unwrap());
    for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let other = build(&BackboneConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(other, a);
}

#[test]
fn a3d_layers_start_near_identity() {
    let b = build(&two_stage(OperatorKind::A3d)).unwrap();
    for st in &b.stages {
        for layer in &st.layers {
            let OperatorState::A3d { p, .. } = &layer.op else {
                panic!()
            };
            for d in 0..3 {
                for k in 0..3 {
                    for c in 0..p.channels() {
                        let id = if d == k { 1.0 } else { 0.0 };
                        assert!((p.get(d, k, c) - id).abs() <= 0.1);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_input_maps_to_zero() {
    for kind in OperatorKind::ALL {
        let cfg = two_stage(kind);
        let b = build(&cfg).unwrap();
        let map = forward_features(&b, &Tensor4::zeros([1, 3, 8, 8]).unwrap()).unwrap();
        assert_eq!(map.shape(), [8, 8, 8]);
        assert_eq!(map.max_abs(), 0.0);
    }
}

#[test]
fn hand_set_collapse_weights_slices() {
    let cfg = tiny(OperatorKind::I3d);
    let mut b = build(&cfg).unwrap();
    let c = 4;
    b.stages[0].unify =
        Kernel5::from_fn([c, c, 1, 1, 1], |[o, i, ..]| (o == i) as u8 as f64).unwrap();
    let weights = [0.5, -2.0, 3.0];
    b.collapse = Kernel5::from_fn(
        [c, c, 3, 1, 1],
        |[o, i, t, ..]| if o == i { weights[t] } else { 0.0 },
    )
    .unwrap();
    let x = random_input(&cfg, 1);
    let stage = forward(&b.stages[0].layers[0].op, &x)
        .unwrap()
        .map(|v| v.max(0.0));
    let map = forward_features(&b, &x).unwrap();
    for ch in 0..c {
        for p in 0..64 {
            let want: f64 = (0..3).map(|d| weights[d] * stage.plane(ch, d)[p]).sum();
            assert!((map.data()[ch * 64 + p] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn unperturbed_a3d_backbone_equals_no_fusion() {
    let mut cfg = two_stage(OperatorKind::A3d);
    cfg.inflate.perturbation = 0.0;
    let a3d = build(&cfg).unwrap();
    let plain = build(&BackboneConfig {
        fusion: OperatorKind::NoFusion,
        ..cfg.clone()
    })
    .unwrap();
    for seed in 0..5 {
        let x = random_input(&cfg, seed);
        let (p, q) = (
            forward_features(&a3d, &x).unwrap(),
            forward_features(&plain, &x).unwrap(),
        );
        assert!(p
            .data()
            .iter()
            .zip(q.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn full_pipeline_gradient_check() {
    let mut rng = SeededRng::new(12);
    for kind in OperatorKind::ALL {
        let r = grad_check(&GradCheckTarget::Backbone(tiny(kind)), &mut rng).unwrap();
        assert!(r.passed, "{kind}: {}", r.summary());
    }
    let r = grad_check(
        &GradCheckTarget::Backbone(two_stage(OperatorKind::A3d)),
        &mut rng,
    )
    .unwrap();
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn zero_grad_map_gives_zero_gradients() {
    let cfg = two_stage(OperatorKind::P3d);
    let b = build(&cfg).unwrap();
    let g = Dense::zeros([8, 8, 8]).unwrap();
    let grads = backward_features(&b, &random_input(&cfg, 2), &g).unwrap();
    assert!(grads
        .params()
        .iter()
        .all(|(_, v)| v.iter().all(|&e| e == 0.0)));
}

#[test]
fn detached_stage_receives_no_gradient() {
    let cfg = two_stage(OperatorKind::Tsm);
    let mut b = build(&cfg).unwrap();
    b.stages[1].unify = Kernel5::zeros(b.stages[1].unify.shape()).unwrap();
    let mut rng = SeededRng::new(3);
    let g = Dense::from_fn([8, 8, 8], |_| rng.normal()).unwrap();
    let grads = backward_features(&b, &random_input(&cfg, 3), &g).unwrap();
    for (_, values) in grads.stages[1].layers[0].op.params() {
        assert!(values.iter().all(|&v| v == 0.0));
    }
    assert!(grads.stages[1].layers[0].bias.iter().all(|&v| v == 0.0));
    let live = grads.stages[0].layers[0].op.params();
    assert!(live[0].1.iter().any(|&v| v != 0.0));
}

#[test]
fn key_slice_output_sees_neighbours_only_through_fusion() {
    for kind in OperatorKind::ALL {
        let cfg = two_stage(kind);
        let mut b = build(&cfg).unwrap();
        let mut rng = SeededRng::new(40);
        for (name, values) in b.params_mut() {
            if name != "collapse" {
                for v in values.iter_mut() {
                    *v += rng.uniform(-0.05, 0.05);
                }
            }
        }
        b.select_key_slice();
        let x = random_input(&cfg, 4);
        let mut bumped = x.clone();
        for p in 0..64 {
            bumped.data_mut()[p] += 1.0; // slice 0 of 3; key slice is 1
        }
        let (y, z) = (
            forward_features(&b, &x).unwrap(),
            forward_features(&b, &bumped).unwrap(),
        );
        let changed = y.max_abs_diff(&z).unwrap() > 0.0;
        assert_eq!(changed, kind != OperatorKind::NoFusion, "{kind}");
    }
}

#[test]
fn output_has_no_depth_axis() {
    let cfg = two_stage(OperatorKind::Acs);
    let b = build(&cfg).unwrap();
    let map: Tensor3 = forward_features(&b, &random_input(&cfg, 6)).unwrap();
    assert_eq!(map.shape(), [8, 8, 8]);
}

#[test]
fn invalid_configs_and_inputs_rejected() {
    let mut cfg = two_stage(OperatorKind::NoFusion);
    cfg.height = 7;
    assert!(build(&cfg).is_err());
    let mut cfg = two_stage(OperatorKind::NoFusion);
    cfg.stages[1].channels = 4;
    assert!(build(&cfg).is_err());
    let mut cfg = two_stage(OperatorKind::NoFusion);
    cfg.stages.clear();
    assert!(build(&cfg).is_err());
    let b = build(&two_stage(OperatorKind::A3d)).unwrap();
    assert!(forward_features(&b, &Tensor4::zeros([1, 3, 7, 7]).unwrap()).is_err());
    assert!(forward_features(&b, &Tensor4::zeros([1, 4, 8, 8]).unwrap()).is_err());
    assert!(forward_features(&b, &Tensor4::zeros([2, 3, 8, 8]).unwrap()).is_err());
    let x = Tensor4::zeros([1, 3, 8, 8]).unwrap();
    assert!(backward_features(&b, &x, &Dense::zeros([8, 4, 4]).unwrap()).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [OperatorKind::Acs, OperatorKind::A3d, OperatorKind::Tsm] {
        let cfg = two_stage(kind);
        let mut b = build(&cfg).unwrap();
        b.stages[0].layers[1].bias[2] = 0.25;
        let path = dir.path().join(kind.name());
        save_backbone(&path, &b).unwrap();
        assert_eq!(load_backbone(&path).unwrap(), b);
    }
}

#[test]
fn stage_text_roundtrip() {
    let stages = BackboneConfig::parse_stages("8x1, 16x2").unwrap();
    assert_eq!(
        stages,
        vec![
            StageSpec {
                channels: 8,
                blocks: 1
            },
            StageSpec {
                channels: 16,
                blocks: 2
            }
        ]
    );
    assert!(BackboneConfig::parse_stages("8").is_err());
    let cfg = two_stage(OperatorKind::P3d);
    assert_eq!(
        BackboneConfig::from_kv(&cfg.to_kv(), &BackboneConfig::default()).unwrap(),
        cfg
    );
}
