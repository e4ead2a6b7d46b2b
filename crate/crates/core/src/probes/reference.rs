//! Naive nested-loop forward passes, written independently of the kernels
//! in `tensor` so they can serve as oracles.
//!
//! The MAC counters here count every tap of every output, in-bounds or not,
//! which is the theoretical count the cost model reports.

use super::{random_tensor, random_trained_state, OpDims};
use crate::error::Result;
use crate::operators::{forward, OperatorKind, OperatorState};
use crate::rng::SeededRng;
use crate::tensor::{Kernel5, Tensor4};

pub const ORACLE_TOLERANCE: f64 = 1e-12;

fn read(x: &Tensor4, c: usize, d: isize, h: isize, w: isize) -> f64 {
    let [_, dd, hh, ww] = x.shape();
    if d < 0 || h < 0 || w < 0 || d >= dd as isize || h >= hh as isize || w >= ww as isize {
        0.0
    } else {
        x.get([c, d as usize, h as usize, w as usize])
    }
}

/// Same-padded cross-correlation by direct summation.
pub fn conv(x: &Tensor4, k: &Kernel5, macs: &mut u128) -> Tensor4 {
    let [_, d, h, w] = x.shape();
    let [cout, cin, kd, kh, kw] = k.shape();
    let (rd, rh, rw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor4::zeros([cout, d, h, w]).expect("nonzero dims");
    for co in 0..cout {
        for od in 0..d {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    *macs += 1;
                                    let v = read(
                                        x,
                                        ci,
                                        od as isize + a as isize - rd,
                                        oh as isize + b as isize - rh,
                                        ow as isize + c as isize - rw,
                                    );
                                    acc += k.get([co, ci, a, b, c]) * v;
                                }
                            }
                        }
                    }
                    out.set([co, od, oh, ow], acc);
                }
            }
        }
    }
    out
}

/// Per-channel slice mixing `out[c,k] = sum_d x[c,d] p[d,k,c]`.
pub fn contract(x: &Tensor4, p: &crate::tensor::FusionWeightP, macs: &mut u128) -> Tensor4 {
    let [c, d, h, w] = x.shape();
    let mut out = Tensor4::zeros([c, d, h, w]).expect("nonzero dims");
    for ch in 0..c {
        for k in 0..d {
            for hh in 0..h {
                for ww in 0..w {
                    let mut acc = 0.0;
                    for src in 0..d {
                        *macs += 1;
                        acc += x.get([ch, src, hh, ww]) * p.get(src, k, ch);
                    }
                    out.set([ch, k, hh, ww], acc);
                }
            }
        }
    }
    out
}

pub fn shift(x: &Tensor4, up: usize, down: usize) -> Tensor4 {
    let [c, d, h, w] = x.shape();
    let mut out = x.clone();
    for ch in 0..c {
        let step = if ch < up {
            1
        } else if ch < up + down {
            -1
        } else {
            continue;
        };
        for k in 0..d {
            for hh in 0..h {
                for ww in 0..w {
                    out.set(
                        [ch, k, hh, ww],
                        read(x, ch, k as isize + step, hh as isize, ww as isize),
                    );
                }
            }
        }
    }
    out
}

/// ACS from the joint `(Cout, Cin, K, K)` kernel rows: output channel `co`
/// belongs to view `v` by the split, and the `K x K` plane is laid along
/// `(H, W)`, `(D, W)` or `(D, H)` for the axial, coronal and sagittal view.
pub fn acs(
    x: &Tensor4,
    rows: &[f64],
    split: (usize, usize, usize),
    k: usize,
    macs: &mut u128,
) -> Tensor4 {
    let [cin, d, h, w] = x.shape();
    let cout = split.0 + split.1 + split.2;
    let r = (k / 2) as isize;
    let mut out = Tensor4::zeros([cout, d, h, w]).expect("nonzero dims");
    for co in 0..cout {
        let view = if co < split.0 {
            0
        } else if co < split.0 + split.1 {
            1
        } else {
            2
        };
        for od in 0..d {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                *macs += 1;
                                let (a, b) = (i as isize - r, j as isize - r);
                                let (pd, ph, pw) = (od as isize, oh as isize, ow as isize);
                                let v = match view {
                                    0 => read(x, ci, pd, ph + a, pw + b),
                                    1 => read(x, ci, pd + a, ph, pw + b),
                                    _ => read(x, ci, pd + a, ph + b, pw),
                                };
                                acc += rows[((co * cin + ci) * k + i) * k + j] * v;
                            }
                        }
                    }
                    out.set([co, od, oh, ow], acc);
                }
            }
        }
    }
    out
}

/// Reference forward for any operator, counting multiply-accumulates.
pub fn operator_forward(state: &OperatorState, x: &Tensor4, macs: &mut u128) -> Tensor4 {
    match state {
        OperatorState::NoFusion { kernel } | OperatorState::I3d { kernel } => conv(x, kernel, macs),
        OperatorState::P3d { planar, axial } => conv(&conv(x, planar, macs), axial, macs),
        OperatorState::Acs {
            axial,
            coronal,
            sagittal,
        } => {
            let mut rows = axial.data().to_vec();
            rows.extend_from_slice(coronal.data());
            rows.extend_from_slice(sagittal.data());
            let split = (axial.shape()[0], coronal.shape()[0], sagittal.shape()[0]);
            acs(x, &rows, split, state.kernel_size(), macs)
        }
        OperatorState::Tsm { kernel, up, down } => conv(&shift(x, *up, *down), kernel, macs),
        OperatorState::A3d { kernel, p } => conv(&contract(x, p, macs), kernel, macs),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub kind: OperatorKind,
    pub trials: usize,
    pub max_abs_dev: f64,
    pub passed: bool,
}

/// Random small instances of `kind`: optimized forward vs reference.
pub fn oracle_equiv(
    kind: OperatorKind,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<OracleSummary> {
    if trials == 0 {
        return Err(crate::Error::Invalid(
            "oracle_equiv needs at least one trial".into(),
        ));
    }
    let mut max_dev = 0.0f64;
    for _ in 0..trials {
        let dims = OpDims {
            cin: 1 + rng.below(4),
            cout: 3 + rng.below(4),
            k: [1, 3, 3, 5][rng.below(4)],
            d: 2 + rng.below(5),
            h: 2 + rng.below(5),
            w: 2 + rng.below(5),
        };
        let state = random_trained_state(kind, &dims, rng)?;
        let x = random_tensor(dims.input_shape(), rng)?;
        let fast = forward(&state, &x)?;
        let slow = operator_forward(&state, &x, &mut 0);
        max_dev = max_dev.max(fast.max_abs_diff(&slow)?);
    }
    Ok(OracleSummary {
        kind,
        trials,
        max_abs_dev: max_dev,
        passed: max_dev <= ORACLE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_matches_reference() {
        let mut rng = SeededRng::new(77);
        for kind in OperatorKind::ALL {
            let s = oracle_equiv(kind, 20, &mut rng).unwrap();
            assert!(s.passed, "{kind}: {}", s.max_abs_dev);
        }
        assert!(oracle_equiv(OperatorKind::A3d, 0, &mut rng).is_err());
    }

    #[test]
    fn acs_view_order_is_axial_coronal_sagittal() {
        use crate::operators::{inflate, Kernel2D};
        use crate::tensor::Dense;
        // Channel 0 taps plane offset (0, +1), channel 1 (+1, 0), channel 2
        // (0, +1). Laid along (H, W), (D, W), (D, H) they read w+1, d+1, h+1.
        let k = 3;
        let mut rows = vec![0.0; 3 * k * k];
        rows[k + 2] = 1.0;
        rows[k * k + 2 * k + 1] = 1.0;
        rows[2 * k * k + k + 2] = 1.0;
        let x =
            Tensor4::from_fn([1, 3, 3, 3], |[_, d, h, w]| (100 * d + 10 * h + w) as f64).unwrap();
        let y = acs(&x, &rows, (1, 1, 1), k, &mut 0);
        assert_eq!(y.get([0, 1, 1, 1]), 112.0);
        assert_eq!(y.get([1, 1, 1, 1]), 211.0);
        assert_eq!(y.get([2, 1, 1, 1]), 121.0);

        let w2d = Kernel2D::new(Dense::from_vec([3, 1, k, k], rows).unwrap()).unwrap();
        let state = inflate(OperatorKind::Acs, &w2d, 3, &mut SeededRng::new(0)).unwrap();
        assert_eq!(forward(&state, &x).unwrap(), y);
    }
}
