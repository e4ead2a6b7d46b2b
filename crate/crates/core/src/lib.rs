//! 3D context fusion operators that can be initialized from 2D kernels.
//!
//! The crate provides the six operators (no fusion, I3D, P3D, ACS, TSM-style
//! shift, and asymmetric slice mixing A3D) with exact forward and backward
//! passes, an exact parameter/MAC cost model, probes for gradients and axial
//! translation equivariance, a small multi-scale backbone, and a synthetic
//! training demo. The guide under `book/` walks through each piece, and its
//! code listings run as doctests of this crate.

pub mod backbone;
pub mod cli;
pub mod cost;
pub mod demo;
pub mod error;
pub mod kv;
pub mod operators;
pub mod probes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use operators::{
    acs_split, backward, forward, inflate, inflate_with, FusionWeightP, InflateOptions, Kernel2D,
    OperatorKind, OperatorState,
};
pub use rng::SeededRng;
pub use tensor::{Dense, Kernel5, PadMode, Tensor3, Tensor4};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/demo.md")]
    mod demo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
