use crate::error::{Error, Result};
use crate::operators::{forward, OperatorState};
use crate::tensor::{shift_slices, Tensor4};

/// How far an operator is from commuting with a depth shift.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub kind: crate::operators::OperatorKind,
    pub shift: isize,
    pub depth: usize,
    /// Slices whose axial receptive field stays clear of any fill.
    pub interior_slices: Vec<usize>,
    pub interior_error: f64,
    pub boundary_error: f64,
    pub global_error: f64,
}

impl EquivarianceReport {
    /// Fraction of output slices outside the interior.
    pub fn boundary_fraction(&self) -> f64 {
        (self.depth - self.interior_slices.len()) as f64 / self.depth as f64
    }
}

/// Interior slices for receptive-field radius `radius` under shift `s`.
pub fn interior_slices(depth: usize, s: isize, radius: Option<usize>) -> Vec<usize> {
    let Some(r) = radius else {
        return Vec::new();
    };
    let lo = s.max(0) + r as isize;
    let hi = depth as isize - 1 + s.min(0) - r as isize;
    (lo.max(0)..=hi).map(|d| d as usize).collect()
}

/// Measures `forward(shift(x, s)) - shift(forward(x), s)` slice by slice,
/// where `shift` moves every slice by `s` with zero fill.
pub fn equivariance_probe(
    state: &OperatorState,
    x: &Tensor4,
    s: isize,
) -> Result<EquivarianceReport> {
    let depth = x.depth();
    if s.unsigned_abs() >= depth {
        return Err(Error::Invalid(format!(
            "shift {s} must be smaller than depth {depth}"
        )));
    }
    let lhs = forward(state, &shift_slices(x, s)?)?;
    let rhs = shift_slices(&forward(state, x)?, s)?;
    let radius = state.kind().axial_radius(state_axial_extent(state));
    let interior = interior_slices(depth, s, radius);
    let mut per_slice = vec![0.0f64; depth];
    for c in 0..lhs.channels() {
        for (d, err) in per_slice.iter_mut().enumerate() {
            for (a, b) in lhs.plane(c, d).iter().zip(rhs.plane(c, d)) {
                *err = err.max((a - b).abs());
            }
        }
    }
    let mut interior_error = 0.0f64;
    let mut boundary_error = 0.0f64;
    for (d, &err) in per_slice.iter().enumerate() {
        if interior.contains(&d) {
            interior_error = interior_error.max(err);
        } else {
            boundary_error = boundary_error.max(err);
        }
    }
    Ok(EquivarianceReport {
        kind: state.kind(),
        shift: s,
        depth,
        interior_slices: interior,
        interior_error,
        boundary_error,
        global_error: interior_error.max(boundary_error),
    })
}

// Axial kernel extent feeding the receptive-field radius.
fn state_axial_extent(state: &OperatorState) -> usize {
    match state {
        OperatorState::I3d { kernel } => kernel.shape()[2],
        OperatorState::P3d { axial, .. } => axial.shape()[2],
        OperatorState::Acs { coronal, .. } => coronal.shape()[2],
        _ => state.kernel_size(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{inflate, Kernel2D, OperatorKind};
    use crate::probes::{random_tensor, random_trained_state, OpDims};
    use crate::rng::SeededRng;

    const DIMS: OpDims = OpDims {
        cin: 8,
        cout: 6,
        k: 3,
        d: 7,
        h: 5,
        w: 5,
    };

    #[test]
    fn interior_ranges() {
        assert_eq!(interior_slices(7, 1, Some(1)), vec![2, 3, 4, 5]);
        assert_eq!(interior_slices(7, -2, Some(1)), vec![1, 2, 3]);
        assert_eq!(interior_slices(3, 1, Some(0)), vec![1, 2]);
        assert!(interior_slices(3, 1, Some(1)).is_empty());
        assert!(interior_slices(7, 0, None).is_empty());
    }

    #[test]
    fn no_fusion_commutes_with_shift() {
        let mut rng = SeededRng::new(1);
        let w2d = Kernel2D::he(6, 8, 3, &mut rng).unwrap();
        let state = inflate(OperatorKind::NoFusion, &w2d, 7, &mut rng).unwrap();
        let x = random_tensor(DIMS.input_shape(), &mut rng).unwrap();
        let r = equivariance_probe(&state, &x, 1).unwrap();
        assert_eq!(r.interior_error, 0.0);
        assert_eq!(r.global_error, 0.0);
    }

    #[test]
    fn symmetric_kinds_are_interior_equivariant_only() {
        let mut rng = SeededRng::new(2);
        for kind in [
            OperatorKind::I3d,
            OperatorKind::P3d,
            OperatorKind::Acs,
            OperatorKind::Tsm,
        ] {
            let state = random_trained_state(kind, &DIMS, &mut rng).unwrap();
            for s in [-2isize, -1, 1, 2] {
                let x = random_tensor(DIMS.input_shape(), &mut rng).unwrap();
                let r = equivariance_probe(&state, &x, s).unwrap();
                assert!(
                    r.interior_error <= 1e-12,
                    "{kind} s={s}: {}",
                    r.interior_error
                );
                assert!(r.boundary_error > 0.0, "{kind} s={s}");
                assert!(r.interior_error <= r.global_error);
            }
        }
    }

    #[test]
    fn a3d_breaks_equivariance_everywhere() {
        let mut rng = SeededRng::new(3);
        let state = random_trained_state(OperatorKind::A3d, &DIMS, &mut rng).unwrap();
        let x = random_tensor(DIMS.input_shape(), &mut rng).unwrap();
        let y = forward(&state, &x).unwrap();
        let r = equivariance_probe(&state, &x, 1).unwrap();
        assert!(r.interior_slices.is_empty());
        assert!(r.global_error > 0.01 * y.max_abs());
        assert!(equivariance_probe(&state, &x, 7).is_err());
    }

    #[test]
    fn boundary_fraction_grows_as_depth_shrinks() {
        let mut rng = SeededRng::new(4);
        let fraction = |d: usize, rng: &mut SeededRng| {
            let dims = OpDims { d, ..DIMS };
            let state = random_trained_state(OperatorKind::I3d, &dims, rng).unwrap();
            let x = random_tensor(dims.input_shape(), rng).unwrap();
            equivariance_probe(&state, &x, 1)
                .unwrap()
                .boundary_fraction()
        };
        assert!(fraction(3, &mut rng) >= fraction(7, &mut rng));
    }
}
