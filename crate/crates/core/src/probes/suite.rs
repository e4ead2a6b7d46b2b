//! The self-check battery behind the `check` command.

use std::fmt::Write as _;

use super::{
    equivariance_probe, grad_check, oracle_equiv, random_tensor, random_trained_state,
    GradCheckTarget, OpDims,
};
use crate::backbone::{build, forward_features, BackboneConfig, StageSpec};
use crate::cost::{closed_form, mac_overhead, param_overhead, LayerDims};
use crate::error::Result;
use crate::operators::{forward, inflate, inflate_with, InflateOptions, Kernel2D, OperatorKind};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn bits_equal(a: &Tensor4, b: &Tensor4) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn random_layer(kind: OperatorKind, rng: &mut SeededRng) -> LayerDims {
    loop {
        let dims = LayerDims {
            c_in: 1 + rng.below(512),
            c_out: 1 + rng.below(512),
            k: 1 + 2 * rng.below(4),
            d: 1 + rng.below(16),
            h: 1 + rng.below(64),
            w: 1 + rng.below(64),
        };
        if dims.validate(kind).is_ok() {
            return dims;
        }
    }
}

/// Exact overhead ratios against the closed forms, per kind.
pub fn cost_formulas(trials: usize, rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OperatorKind::ALL {
        let mut mismatches = 0;
        for _ in 0..trials {
            let dims = random_layer(kind, rng);
            if param_overhead(kind, &dims)? != closed_form::params(kind, &dims)
                || mac_overhead(kind, &dims)? != closed_form::macs(kind, &dims)
            {
                mismatches += 1;
            }
        }
        out.push(CheckResult::new(
            format!("cost formulas {kind}"),
            mismatches == 0,
            format!("{mismatches} of {trials} random layers differ"),
        ));
    }
    Ok(out)
}

/// A3D with identity mixing, P3D at init and NoFusion agree bit for bit,
/// as single operators and composed through the backbone.
pub fn init_equivalence(trials: usize, rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let exact = InflateOptions {
        perturbation: 0.0,
        ..InflateOptions::default()
    };
    let mut op_fail = 0;
    for _ in 0..trials {
        let (cin, cout, k) = (1 + rng.below(4), 1 + rng.below(5), [1, 3, 5][rng.below(3)]);
        let d = 1 + rng.below(6);
        let w2d = Kernel2D::he(cout, cin, k, rng)?;
        let x = random_tensor([cin, d, 2 + rng.below(6), 2 + rng.below(6)], rng)?;
        let base = forward(&inflate(OperatorKind::NoFusion, &w2d, d, rng)?, &x)?;
        let a3d = forward(&inflate_with(OperatorKind::A3d, &w2d, d, rng, &exact)?, &x)?;
        let p3d = forward(&inflate(OperatorKind::P3d, &w2d, d, rng)?, &x)?;
        if !bits_equal(&a3d, &base) || !bits_equal(&p3d, &base) {
            op_fail += 1;
        }
    }
    let mut bb_fail = 0;
    for _ in 0..trials {
        let c0 = 2 + rng.below(4);
        let cfg = BackboneConfig {
            depth: [3, 5, 7][rng.below(3)],
            stages: vec![
                StageSpec {
                    channels: c0,
                    blocks: 1 + rng.below(2),
                },
                StageSpec {
                    channels: c0 + rng.below(4),
                    blocks: 1,
                },
            ],
            fusion: OperatorKind::A3d,
            seed: rng.next_u64(),
            height: 2 * (1 + rng.below(4)),
            width: 2 * (1 + rng.below(4)),
            kernel_size: 3,
            inflate: exact,
        };
        let x = random_tensor([1, cfg.depth, cfg.height, cfg.width], rng)?;
        let mut maps = Vec::new();
        for kind in [OperatorKind::NoFusion, OperatorKind::A3d, OperatorKind::P3d] {
            let b = build(&BackboneConfig {
                fusion: kind,
                ..cfg.clone()
            })?;
            let m = forward_features(&b, &x)?;
            maps.push(m.into_vec());
        }
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&maps[0], &maps[1]) || !same(&maps[0], &maps[2]) {
            bb_fail += 1;
        }
    }
    Ok(vec![
        CheckResult::new(
            "init equivalence operators",
            op_fail == 0,
            format!("{op_fail} of {trials} pairs differ"),
        ),
        CheckResult::new(
            "init equivalence backbone",
            bb_fail == 0,
            format!("{bb_fail} of {trials} pairs differ"),
        ),
    ])
}

pub const GRAD_DIMS: OpDims = OpDims {
    cin: 4,
    cout: 5,
    k: 3,
    d: 4,
    h: 5,
    w: 5,
};

pub fn grad_targets() -> Vec<GradCheckTarget> {
    let mut targets = vec![
        GradCheckTarget::Conv3d {
            input: [3, 4, 5, 5],
            kernel: [4, 3, 3, 3, 3],
        },
        GradCheckTarget::SliceContract {
            input: [3, 5, 4, 4],
        },
    ];
    for kind in OperatorKind::ALL {
        targets.push(GradCheckTarget::Operator {
            kind,
            dims: GRAD_DIMS,
        });
    }
    for kind in OperatorKind::ALL {
        targets.push(GradCheckTarget::Backbone(BackboneConfig {
            depth: 3,
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
            fusion: kind,
            seed: 21,
            height: 8,
            width: 8,
            kernel_size: 3,
            inflate: InflateOptions::default(),
        }));
    }
    targets
}

pub fn gradients(rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    grad_targets()
        .iter()
        .map(|t| {
            let r = grad_check(t, rng)?;
            Ok(CheckResult::new(
                format!("gradient {}", t.name()),
                r.passed,
                r.summary(),
            ))
        })
        .collect()
}

pub fn oracles(trials: usize, rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    OperatorKind::ALL
        .iter()
        .map(|&kind| {
            let s = oracle_equiv(kind, trials, rng)?;
            Ok(CheckResult::new(
                format!("reference loops {kind}"),
                s.passed,
                format!(
                    "max abs deviation {:.3e} over {} instances",
                    s.max_abs_dev, s.trials
                ),
            ))
        })
        .collect()
}

pub const EQUIVARIANCE_DIMS: OpDims = OpDims {
    cin: 4,
    cout: 6,
    k: 3,
    d: 7,
    h: 5,
    w: 5,
};

/// Interior exactness and boundary leakage for the symmetric kinds, a
/// global gap for A3D.
pub fn equivariance(rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OperatorKind::ALL {
        let state = random_trained_state(kind, &EQUIVARIANCE_DIMS, rng)?;
        let x = random_tensor(EQUIVARIANCE_DIMS.input_shape(), rng)?;
        let y_max = forward(&state, &x)?.max_abs();
        for s in [1isize, -2] {
            let r = equivariance_probe(&state, &x, s)?;
            let (passed, detail) = match kind {
                OperatorKind::A3d => (
                    r.global_error > 1e-2 * y_max,
                    format!("global {:.3e} vs output max {:.3e}", r.global_error, y_max),
                ),
                OperatorKind::NoFusion => (
                    r.interior_error <= 1e-12 && r.global_error <= 1e-12,
                    format!("global {:.3e}", r.global_error),
                ),
                _ => (
                    r.interior_error <= 1e-12 && r.boundary_error > 0.0,
                    format!(
                        "interior {:.3e} on {} slices, boundary {:.3e}",
                        r.interior_error,
                        r.interior_slices.len(),
                        r.boundary_error
                    ),
                ),
            };
            out.push(CheckResult::new(
                format!("equivariance {kind} shift {s}"),
                passed,
                detail,
            ));
        }
    }
    Ok(out)
}

/// Everything, with fixed trial counts.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let root = SeededRng::new(seed);
    let mut out = cost_formulas(100, &mut root.fork(1))?;
    out.extend(init_equivalence(50, &mut root.fork(2))?);
    out.extend(gradients(&mut root.fork(3))?);
    out.extend(oracles(20, &mut root.fork(4))?);
    out.extend(equivariance(&mut root.fork(5))?);
    Ok(out)
}

pub fn render(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} checks, {failed} failed", results.len());
    out
}
