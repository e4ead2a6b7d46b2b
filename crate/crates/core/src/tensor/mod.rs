//! Dense row-major tensors and the three kernels everything else is built
//! from: same-padded 3D cross-correlation, per-channel slice contraction,
//! and axial slice shifting.
//!
//! Feature maps are `(C, D, H, W)`; convolution kernels are
//! `(Cout, Cin, Kd, Kh, Kw)`. All arithmetic is `f64` and every reduction
//! runs in a fixed ascending order, so results are bit-reproducible.

mod contract;
mod conv;
pub mod io;
mod shift;

pub use contract::{slice_contract_backward, slice_contract_forward, FusionWeightP};
pub use conv::{
    conv3d_backward, conv3d_forward, depth_collapse_backward, depth_collapse_forward, PadMode,
};
pub use shift::{axial_shift, axial_shift_adjoint, shift_slices};

use crate::error::{Error, Result};

/// A dense rank-`N` array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<const N: usize> {
    shape: [usize; N],
    data: Vec<f64>,
}

/// Feature volume `(C, D, H, W)`.
pub type Tensor4 = Dense<4>;
/// 3D convolution kernel `(Cout, Cin, Kd, Kh, Kw)`.
pub type Kernel5 = Dense<5>;
/// 2D feature map `(C, H, W)`.
pub type Tensor3 = Dense<3>;

impl<const N: usize> Dense<N> {
    pub fn from_vec(shape: [usize; N], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ZeroDim {
                op: "Dense::from_vec",
                shape: shape.to_vec(),
            });
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape {
                op: "Dense::from_vec",
                detail: format!("shape {shape:?} needs {len} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; N]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; N], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::from_vec(shape, vec![value; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major.
    pub fn from_fn(shape: [usize; N], mut f: impl FnMut([usize; N]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = [0usize; N];
        for _ in 0..len {
            data.push(f(idx));
            for axis in (0..N).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> [usize; N] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: [usize; N]) -> usize {
        let mut off = 0;
        for (&i, &extent) in idx.iter().zip(&self.shape) {
            debug_assert!(i < extent);
            off = off * extent + i;
        }
        off
    }

    pub fn get(&self, idx: [usize; N]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; N], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "Dense::axpy")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// Inner product, summed in storage order.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "Dense::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "Dense::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    pub fn reshape<const M: usize>(self, shape: [usize; M]) -> Result<Dense<M>> {
        Dense::from_vec(shape, self.data)
    }
}

impl Tensor4 {
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn depth(&self) -> usize {
        self.shape[1]
    }

    /// The `(H, W)` plane at `(c, d)`.
    pub fn plane(&self, c: usize, d: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (c * self.shape[1] + d) * hw;
        &self.data[start..start + hw]
    }

    /// Stacks channel blocks of equal `(D, H, W)` into one tensor.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let [_, d, h, w] = first.shape;
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            if part.shape[1..] != [d, h, w] {
                return Err(Error::Shape {
                    op: "concat_channels",
                    detail: format!("{:?} vs {:?}", part.shape, first.shape),
                });
            }
            channels += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        Tensor4::from_vec([channels, d, h, w], data)
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn channel_range(&self, start: usize, count: usize) -> Result<Tensor4> {
        let [c, d, h, w] = self.shape;
        if count == 0 || start + count > c {
            return Err(Error::Shape {
                op: "channel_range",
                detail: format!("range {start}..{} of {c} channels", start + count),
            });
        }
        let block = d * h * w;
        Tensor4::from_vec(
            [count, d, h, w],
            self.data[start * block..(start + count) * block].to_vec(),
        )
    }
}
