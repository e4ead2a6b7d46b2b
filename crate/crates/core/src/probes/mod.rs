//! Verification harness: finite-difference gradient checks, the axial
//! equivariance probe, and comparisons against naive loop references.

mod equivariance;
mod gradcheck;
pub mod reference;
pub mod suite;

pub use equivariance::{equivariance_probe, EquivarianceReport};
pub use gradcheck::{
    check_gradients, check_gradients_smooth, grad_check, GradCheckReport, GradCheckTarget, FD_STEP,
    GRAD_CHECK_THRESHOLD, MIN_SAMPLES_PER_TENSOR,
};
pub use reference::{oracle_equiv, OracleSummary, ORACLE_TOLERANCE};

use crate::error::Result;
use crate::operators::{inflate_with, InflateOptions, Kernel2D, OperatorKind, OperatorState};
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

pub fn random_tensor(shape: [usize; 4], rng: &mut SeededRng) -> Result<Tensor4> {
    Tensor4::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Shape of a single-operator test instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpDims {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl OpDims {
    pub fn input_shape(&self) -> [usize; 4] {
        [self.cin, self.d, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.cout, self.d, self.h, self.w]
    }
}

/// An operator inflated from a random 2D kernel, then with every weight
/// overwritten by `U[-1, 1]` so no coordinate sits at its special init value.
/// TSM gets at least one shifted channel per direction when `cin >= 2`.
pub fn random_trained_state(
    kind: OperatorKind,
    dims: &OpDims,
    rng: &mut SeededRng,
) -> Result<OperatorState> {
    let w2d = Kernel2D::he(dims.cout, dims.cin, dims.k, rng)?;
    let opts = InflateOptions {
        shift_divisor: if dims.cin >= 2 { dims.cin.min(8) } else { 8 },
        ..InflateOptions::default()
    };
    let mut state = inflate_with(kind, &w2d, dims.d, rng, &opts)?;
    for (_, values) in state.params_mut() {
        for v in values.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    Ok(state)
}
