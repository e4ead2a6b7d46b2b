use super::*;
use crate::probes::{random_tensor, random_trained_state, OpDims};
use crate::tensor::conv3d_backward;

fn kernel(cout: usize, cin: usize, k: usize, seed: u64) -> Kernel2D {
    Kernel2D::he(cout, cin, k, &mut SeededRng::new(seed)).unwrap()
}

fn bits_equal(a: &Tensor4, b: &Tensor4) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
}

#[test]
fn acs_split_rule() {
    assert_eq!(acs_split(3).unwrap(), (1, 1, 1));
    assert_eq!(acs_split(64).unwrap(), (22, 21, 21));
    assert_eq!(acs_split(7).unwrap(), (3, 2, 2));
    assert_eq!(acs_split(4).unwrap(), (2, 1, 1));
    assert!(acs_split(2).is_err());
    for c in 3..200 {
        let (a, b, s) = acs_split(c).unwrap();
        assert_eq!(a + b + s, c);
        assert!(a >= b && b >= s && s >= 1);
    }
}

#[test]
fn i3d_repeats_scaled_kernel() {
    let w2d = Kernel2D::new(Dense::full([2, 2, 3, 3], 1.0).unwrap()).unwrap();
    let state = inflate(OperatorKind::I3d, &w2d, 3, &mut SeededRng::new(0)).unwrap();
    let OperatorState::I3d { kernel } = &state else {
        panic!("wrong kind")
    };
    assert_eq!(kernel.shape(), [2, 2, 3, 3, 3]);
    assert!(kernel.data().iter().all(|&v| v == 1.0 / 3.0));
}

#[test]
fn p3d_axial_starts_as_centre_tap() {
    let state = inflate(
        OperatorKind::P3d,
        &kernel(4, 2, 3, 1),
        3,
        &mut SeededRng::new(0),
    )
    .unwrap();
    let OperatorState::P3d { axial, .. } = &state else {
        panic!("wrong kind")
    };
    assert_eq!(axial.shape(), [4, 4, 3, 1, 1]);
    for o in 0..4 {
        for i in 0..4 {
            let taps: Vec<f64> = (0..3).map(|t| axial.get([o, i, t, 0, 0])).collect();
            let want = if o == i {
                vec![0.0, 1.0, 0.0]
            } else {
                vec![0.0; 3]
            };
            assert_eq!(taps, want);
        }
    }
}

#[test]
fn a3d_mixing_starts_near_identity() {
    let mut rng = SeededRng::new(5);
    let state = inflate(OperatorKind::A3d, &kernel(4, 6, 3, 2), 3, &mut rng).unwrap();
    let OperatorState::A3d { p, .. } = &state else {
        panic!("wrong kind")
    };
    assert_eq!(p.as_dense().shape(), [3, 3, 6]);
    let mut any_off = false;
    for d in 0..3 {
        for k in 0..3 {
            for c in 0..6 {
                let id = if d == k { 1.0 } else { 0.0 };
                let dev = (p.get(d, k, c) - id).abs();
                assert!(dev <= 0.1);
                any_off |= dev > 0.0;
            }
        }
    }
    assert!(any_off);
    assert_eq!(state.depth_hint(), Some(3));
}

#[test]
fn tsm_default_splits_use_an_eighth() {
    let state = inflate(
        OperatorKind::Tsm,
        &kernel(4, 17, 3, 3),
        3,
        &mut SeededRng::new(0),
    )
    .unwrap();
    assert!(matches!(state, OperatorState::Tsm { up: 2, down: 2, .. }));
}

#[test]
fn acs_views_are_oriented() {
    let state = inflate(
        OperatorKind::Acs,
        &kernel(7, 2, 3, 4),
        3,
        &mut SeededRng::new(0),
    )
    .unwrap();
    let OperatorState::Acs {
        axial,
        coronal,
        sagittal,
    } = &state
    else {
        panic!("wrong kind")
    };
    assert_eq!(axial.shape(), [3, 2, 1, 3, 3]);
    assert_eq!(coronal.shape(), [2, 2, 3, 1, 3]);
    assert_eq!(sagittal.shape(), [2, 2, 3, 3, 1]);
    assert!(inflate(
        OperatorKind::Acs,
        &kernel(2, 2, 3, 4),
        3,
        &mut SeededRng::new(0)
    )
    .is_err());
}

#[test]
fn inflate_rejects_zero_depth() {
    for kind in OperatorKind::ALL {
        assert!(inflate(kind, &kernel(3, 2, 3, 0), 0, &mut SeededRng::new(0)).is_err());
    }
}

#[test]
fn output_channels_follow_the_2d_kernel() {
    let mut rng = SeededRng::new(6);
    let x = random_tensor([3, 4, 5, 5], &mut rng).unwrap();
    for kind in OperatorKind::ALL {
        let state = inflate(kind, &kernel(5, 3, 3, 7), 4, &mut rng).unwrap();
        assert_eq!(state.cout(), 5);
        assert_eq!(forward(&state, &x).unwrap().shape(), [5, 4, 5, 5]);
    }
}

#[test]
fn init_equivalence_is_bit_exact() {
    let exact = InflateOptions {
        perturbation: 0.0,
        ..InflateOptions::default()
    };
    let mut rng = SeededRng::new(8);
    for trial in 0..10 {
        let w2d = kernel(4, 3, 3, 100 + trial);
        let x = random_tensor([3, 5, 6, 4], &mut rng).unwrap();
        let base = forward(
            &inflate(OperatorKind::NoFusion, &w2d, 5, &mut rng).unwrap(),
            &x,
        )
        .unwrap();
        let a3d = inflate_with(OperatorKind::A3d, &w2d, 5, &mut rng, &exact).unwrap();
        let p3d = inflate(OperatorKind::P3d, &w2d, 5, &mut rng).unwrap();
        assert!(bits_equal(&forward(&a3d, &x).unwrap(), &base));
        assert!(bits_equal(&forward(&p3d, &x).unwrap(), &base));
    }
}

#[test]
fn i3d_matches_2d_conv_on_interior_of_constant_stack() {
    let mut rng = SeededRng::new(9);
    let w2d = kernel(3, 2, 3, 10);
    let plane_input = random_tensor([2, 1, 6, 6], &mut rng).unwrap();
    let stacked =
        Tensor4::from_fn([2, 5, 6, 6], |[c, _, h, w]| plane_input.get([c, 0, h, w])).unwrap();
    let i3d = inflate(OperatorKind::I3d, &w2d, 5, &mut rng).unwrap();
    let y = forward(&i3d, &stacked).unwrap();
    // 2D oracle: direct per-plane summation with the raw kernel.
    let oracle = crate::probes::reference::conv(&plane_input, &w2d.unsqueeze(), &mut 0);
    for d in 1..4 {
        for c in 0..3 {
            for (a, b) in y.plane(c, d).iter().zip(oracle.plane(c, 0)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
    let edge_diff = y
        .plane(0, 0)
        .iter()
        .zip(oracle.plane(0, 0))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(edge_diff > 1e-6);
}

#[test]
fn identity_mixing_has_no_fusion_jacobian() {
    let mut rng = SeededRng::new(11);
    let w2d = kernel(4, 3, 3, 12);
    let mut a3d = inflate(OperatorKind::A3d, &w2d, 4, &mut rng).unwrap();
    // stand-in for a trained kernel; mixing reset to identity
    if let OperatorState::A3d { kernel, p } = &mut a3d {
        for v in kernel.data_mut() {
            *v += 0.3;
        }
        *p = FusionWeightP::identity(4, 3).unwrap();
    }
    let OperatorState::A3d { kernel, .. } = &a3d else {
        unreachable!()
    };
    let plain = OperatorState::NoFusion {
        kernel: kernel.clone(),
    };
    let x = random_tensor([3, 4, 5, 5], &mut rng).unwrap();
    let g = random_tensor([4, 4, 5, 5], &mut rng).unwrap();
    let (gx_a, _) = backward(&a3d, &x, &g).unwrap();
    let (gx_n, _) = backward(&plain, &x, &g).unwrap();
    assert!(gx_a.max_abs_diff(&gx_n).unwrap() <= 1e-12);
}

fn perturb_slice(x: &Tensor4, d: usize) -> Tensor4 {
    let mut y = x.clone();
    for c in 0..x.channels() {
        for h in 0..x.shape()[2] {
            for w in 0..x.shape()[3] {
                y.set([c, d, h, w], y.get([c, d, h, w]) + 1.0);
            }
        }
    }
    y
}

fn changed_slices(a: &Tensor4, b: &Tensor4) -> Vec<usize> {
    (0..a.depth())
        .filter(|&d| (0..a.channels()).any(|c| a.plane(c, d) != b.plane(c, d)))
        .collect()
}

#[test]
fn tsm_is_local_a3d_is_global() {
    let dims = OpDims {
        cin: 8,
        cout: 4,
        k: 3,
        d: 6,
        h: 4,
        w: 4,
    };
    let mut rng = SeededRng::new(13);
    let tsm = random_trained_state(OperatorKind::Tsm, &dims, &mut rng).unwrap();
    let a3d = random_trained_state(OperatorKind::A3d, &dims, &mut rng).unwrap();
    let x = random_tensor(dims.input_shape(), &mut rng).unwrap();
    let (y_t, y_a) = (forward(&tsm, &x).unwrap(), forward(&a3d, &x).unwrap());
    for d in 0..dims.d {
        let bumped = perturb_slice(&x, d);
        let local = changed_slices(&y_t, &forward(&tsm, &bumped).unwrap());
        assert!(
            local.iter().all(|&o| o + 1 >= d && o <= d + 1),
            "slice {d}: {local:?}"
        );
        let global = changed_slices(&y_a, &forward(&a3d, &bumped).unwrap());
        assert_eq!(global, (0..dims.d).collect::<Vec<_>>());
    }
}

#[test]
fn acs_gradients_are_the_view_gradients() {
    let dims = OpDims {
        cin: 2,
        cout: 5,
        k: 3,
        d: 4,
        h: 4,
        w: 4,
    };
    let mut rng = SeededRng::new(14);
    let state = random_trained_state(OperatorKind::Acs, &dims, &mut rng).unwrap();
    let x = random_tensor(dims.input_shape(), &mut rng).unwrap();
    let g = random_tensor(dims.output_shape(), &mut rng).unwrap();
    let (gx, grads) = backward(&state, &x, &g).unwrap();
    let (
        OperatorState::Acs {
            axial,
            coronal,
            sagittal,
        },
        OperatorState::Acs {
            axial: ga,
            coronal: gc,
            sagittal: gs,
        },
    ) = (&state, &grads)
    else {
        panic!("wrong kind")
    };
    let (va, vc, vs) = (
        conv3d_backward(&x, axial, &g.channel_range(0, 2).unwrap()).unwrap(),
        conv3d_backward(&x, coronal, &g.channel_range(2, 2).unwrap()).unwrap(),
        conv3d_backward(&x, sagittal, &g.channel_range(4, 1).unwrap()).unwrap(),
    );
    assert_eq!(ga, &va.1);
    assert_eq!(gc, &vc.1);
    assert_eq!(gs, &vs.1);
    let sum = va.0.add(&vc.0).unwrap().add(&vs.0).unwrap();
    assert!(gx.max_abs_diff(&sum).unwrap() <= 1e-12);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let dims = OpDims {
        cin: 3,
        cout: 4,
        k: 3,
        d: 3,
        h: 4,
        w: 4,
    };
    let mut rng = SeededRng::new(15);
    for kind in OperatorKind::ALL {
        let state = random_trained_state(kind, &dims, &mut rng).unwrap();
        let x = random_tensor(dims.input_shape(), &mut rng).unwrap();
        let g = Tensor4::zeros(dims.output_shape()).unwrap();
        let (gx, grads) = backward(&state, &x, &g).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert!(grads
            .params()
            .iter()
            .all(|(_, v)| v.iter().all(|&e| e == 0.0)));
    }
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let mut rng = SeededRng::new(16);
    let a3d = inflate(OperatorKind::A3d, &kernel(4, 3, 3, 1), 3, &mut rng).unwrap();
    assert!(forward(&a3d, &Tensor4::zeros([3, 4, 4, 4]).unwrap()).is_err());
    assert!(forward(&a3d, &Tensor4::zeros([2, 3, 4, 4]).unwrap()).is_err());
    let x = Tensor4::zeros([3, 3, 4, 4]).unwrap();
    assert!(backward(&a3d, &x, &Tensor4::zeros([3, 3, 4, 4]).unwrap()).is_err());
}

#[test]
fn kind_names_roundtrip() {
    for kind in OperatorKind::ALL {
        assert_eq!(kind.name().parse::<OperatorKind>().unwrap(), kind);
    }
    assert_eq!("A3D".parse::<OperatorKind>().unwrap(), OperatorKind::A3d);
    assert!("alignshift".parse::<OperatorKind>().is_err());
}

#[test]
fn saved_operators_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let dims = OpDims {
        cin: 9,
        cout: 7,
        k: 3,
        d: 3,
        h: 4,
        w: 4,
    };
    let mut rng = SeededRng::new(17);
    for kind in OperatorKind::ALL {
        let state = random_trained_state(kind, &dims, &mut rng).unwrap();
        let sub = dir.path().join(kind.name());
        save_operator(&sub, &state, Some(42)).unwrap();
        let (back, manifest) = load_operator(&sub).unwrap();
        assert_eq!(back, state);
        assert_eq!(manifest.seed, Some(42));
        assert_eq!(manifest.kind, kind);
    }
    std::fs::write(dir.path().join("a3d/manifest.txt"), "kind=a3d\ncout=7\n").unwrap();
    assert!(load_operator(dir.path().join("a3d")).is_err());
}
