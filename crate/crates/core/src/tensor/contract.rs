use super::{Dense, Tensor4};
use crate::error::{shape_err, Error, Result};

/// Per-channel slice mixing weights, stored `(D, D, C)` as `p[d, k, c]`:
/// the weight with which input slice `d` contributes to output slice `k`
/// in channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeightP(Dense<3>);

impl FusionWeightP {
    pub fn new(inner: Dense<3>) -> Result<Self> {
        let [d0, d1, _] = inner.shape();
        if d0 != d1 {
            return Err(shape_err(
                "FusionWeightP::new",
                format!("first two extents must match, got {d0}x{d1}"),
            ));
        }
        if let Some(index) = inner.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "FusionWeightP".into(),
                index,
            });
        }
        Ok(Self(inner))
    }

    /// Identity mixing in every channel.
    pub fn identity(depth: usize, channels: usize) -> Result<Self> {
        Self::new(Dense::from_fn([depth, depth, channels], |[d, k, _]| {
            if d == k {
                1.0
            } else {
                0.0
            }
        })?)
    }

    pub fn depth(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn as_dense(&self) -> &Dense<3> {
        &self.0
    }

    pub fn into_dense(self) -> Dense<3> {
        self.0
    }

    /// Raw mutable access for optimizers; entries are not re-validated.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn get(&self, d: usize, k: usize, c: usize) -> f64 {
        self.0.get([d, k, c])
    }
}

fn check(op: &'static str, x: &Tensor4, p: &FusionWeightP) -> Result<()> {
    let [c, d, _, _] = x.shape();
    if p.depth() != d || p.channels() != c {
        return Err(shape_err(
            op,
            format!(
                "fusion weight {:?} does not match input (C={c}, D={d})",
                p.as_dense().shape()
            ),
        ));
    }
    Ok(())
}

/// `out[c,k,h,w] = sum_d x[c,d,h,w] * p[d,k,c]`, summed over ascending `d`.
pub fn slice_contract_forward(x: &Tensor4, p: &FusionWeightP) -> Result<Tensor4> {
    check("slice_contract_forward", x, p)?;
    let [c, d, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor4::zeros(x.shape())?;
    let os = out.data_mut();
    for ch in 0..c {
        for k in 0..d {
            let start = (ch * d + k) * plane;
            let orow = &mut os[start..start + plane];
            for src in 0..d {
                let wt = p.get(src, k, ch);
                for (o, xv) in orow.iter_mut().zip(x.plane(ch, src)) {
                    *o += xv * wt;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`slice_contract_forward`] in both arguments.
pub fn slice_contract_backward(
    x: &Tensor4,
    p: &FusionWeightP,
    grad_out: &Tensor4,
) -> Result<(Tensor4, FusionWeightP)> {
    check("slice_contract_backward", x, p)?;
    x.check_same_shape(grad_out, "slice_contract_backward")?;
    let [c, d, h, w] = x.shape();
    let plane = h * w;
    let mut grad_x = Tensor4::zeros(x.shape())?;
    let mut grad_p = Dense::<3>::zeros([d, d, c])?;
    for ch in 0..c {
        for src in 0..d {
            let start = (ch * d + src) * plane;
            for k in 0..d {
                let wt = p.get(src, k, ch);
                let g = grad_out.plane(ch, k);
                let gx = &mut grad_x.data_mut()[start..start + plane];
                for (gxv, gv) in gx.iter_mut().zip(g) {
                    *gxv += gv * wt;
                }
                let acc: f64 = x.plane(ch, src).iter().zip(g).map(|(a, b)| a * b).sum();
                grad_p.set([src, k, ch], acc);
            }
        }
    }
    Ok((grad_x, FusionWeightP(grad_p)))
}
