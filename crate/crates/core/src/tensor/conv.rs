use super::{Kernel5, Tensor3, Tensor4};
use crate::error::{shape_err, Result};

/// Boundary handling for [`conv3d_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Zero padding of `k / 2` on each side, so output extent equals input extent.
    #[default]
    SamePadZero,
}

struct Geometry {
    cout: usize,
    cin: usize,
    taps: [usize; 3],
    extent: [usize; 3],
}

impl Geometry {
    fn new(op: &'static str, x: &Tensor4, k: &Kernel5) -> Result<Self> {
        let [c, d, h, w] = x.shape();
        let [cout, cin, kd, kh, kw] = k.shape();
        if c != cin {
            return Err(shape_err(
                op,
                format!("input has {c} channels, kernel expects {cin}"),
            ));
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(
                op,
                format!("kernel extents must be odd, got {kd}x{kh}x{kw}"),
            ));
        }
        Ok(Self {
            cout,
            cin,
            taps: [kd, kh, kw],
            extent: [d, h, w],
        })
    }

    /// For tap `t` along an axis of extent `n` with kernel size `k`, the range
    /// of output positions whose input position `o + t - k/2` is in bounds,
    /// and the signed input offset.
    fn valid(n: usize, k: usize, t: usize) -> (usize, usize, isize) {
        let shift = t as isize - (k / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).min(n as isize).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Same-padded 3D cross-correlation.
///
/// `out[co,d,h,w] = sum over (ci, td, th, tw) of
/// k[co,ci,td,th,tw] * x[ci, d+td-kd/2, h+th-kh/2, w+tw-kw/2]`, with
/// out-of-bounds taps contributing nothing. Each output element accumulates
/// its terms ci-major, then td, th, tw.
pub fn conv3d_forward(x: &Tensor4, k: &Kernel5, pad: PadMode) -> Result<Tensor4> {
    let PadMode::SamePadZero = pad;
    let g = Geometry::new("conv3d_forward", x, k)?;
    let [d, h, w] = g.extent;
    let [kd, kh, kw] = g.taps;
    let plane = h * w;
    let vol = d * plane;
    let mut out = Tensor4::zeros([g.cout, d, h, w])?;
    let xs = x.data();
    let ks = k.data();
    let os = out.data_mut();
    for co in 0..g.cout {
        let o_base = co * vol;
        for ci in 0..g.cin {
            let x_base = ci * vol;
            for td in 0..kd {
                let (d_lo, d_hi, d_off) = Geometry::valid(d, kd, td);
                for th in 0..kh {
                    let (h_lo, h_hi, h_off) = Geometry::valid(h, kh, th);
                    for tw in 0..kw {
                        let (w_lo, w_hi, w_off) = Geometry::valid(w, kw, tw);
                        let wt = ks[(((co * g.cin + ci) * kd + td) * kh + th) * kw + tw];
                        for od in d_lo..d_hi {
                            let id = (od as isize + d_off) as usize;
                            for oh in h_lo..h_hi {
                                let ih = (oh as isize + h_off) as usize;
                                let orow = o_base + od * plane + oh * w;
                                let irow = x_base + id * plane + ih * w;
                                for ow in w_lo..w_hi {
                                    let iw = (ow as isize + w_off) as usize;
                                    os[orow + ow] += wt * xs[irow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv3d_forward`] with respect to both the input and the kernel.
pub fn conv3d_backward(x: &Tensor4, k: &Kernel5, grad_out: &Tensor4) -> Result<(Tensor4, Kernel5)> {
    let g = Geometry::new("conv3d_backward", x, k)?;
    let [d, h, w] = g.extent;
    if grad_out.shape() != [g.cout, d, h, w] {
        return Err(shape_err(
            "conv3d_backward",
            format!(
                "grad_out {:?} does not match output {:?}",
                grad_out.shape(),
                [g.cout, d, h, w]
            ),
        ));
    }
    let [kd, kh, kw] = g.taps;
    let plane = h * w;
    let vol = d * plane;
    let mut grad_x = Tensor4::zeros(x.shape())?;
    let mut grad_k = Kernel5::zeros(k.shape())?;
    let xs = x.data();
    let ks = k.data();
    let gs = grad_out.data();
    {
        let gx = grad_x.data_mut();
        let gk = grad_k.data_mut();
        for co in 0..g.cout {
            let o_base = co * vol;
            for ci in 0..g.cin {
                let x_base = ci * vol;
                for td in 0..kd {
                    let (d_lo, d_hi, d_off) = Geometry::valid(d, kd, td);
                    for th in 0..kh {
                        let (h_lo, h_hi, h_off) = Geometry::valid(h, kh, th);
                        for tw in 0..kw {
                            let (w_lo, w_hi, w_off) = Geometry::valid(w, kw, tw);
                            let kidx = (((co * g.cin + ci) * kd + td) * kh + th) * kw + tw;
                            let wt = ks[kidx];
                            let mut acc = 0.0;
                            for od in d_lo..d_hi {
                                let id = (od as isize + d_off) as usize;
                                for oh in h_lo..h_hi {
                                    let ih = (oh as isize + h_off) as usize;
                                    let orow = o_base + od * plane + oh * w;
                                    let irow = x_base + id * plane + ih * w;
                                    for ow in w_lo..w_hi {
                                        let iw = (ow as isize + w_off) as usize;
                                        let go = gs[orow + ow];
                                        gx[irow + iw] += wt * go;
                                        acc += go * xs[irow + iw];
                                    }
                                }
                            }
                            gk[kidx] = acc;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_k))
}

fn collapse_check(op: &'static str, x: &Tensor4, k: &Kernel5) -> Result<()> {
    let [c, d, _, _] = x.shape();
    let [_, cin, kd, kh, kw] = k.shape();
    if c != cin || kd != d || kh != 1 || kw != 1 {
        return Err(shape_err(
            op,
            format!(
                "collapse kernel {:?} incompatible with input {:?}",
                k.shape(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

/// Valid (unpadded) `D x 1 x 1` convolution that reduces depth to one,
/// returned as a `(Cout, H, W)` map.
pub fn depth_collapse_forward(x: &Tensor4, k: &Kernel5) -> Result<Tensor3> {
    collapse_check("depth_collapse_forward", x, k)?;
    let [cin, d, h, w] = x.shape();
    let cout = k.shape()[0];
    let plane = h * w;
    let mut out = Tensor3::zeros([cout, h, w])?;
    let os = out.data_mut();
    for co in 0..cout {
        let orow = &mut os[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            for td in 0..d {
                let wt = k.data()[(co * cin + ci) * d + td];
                for (o, xv) in orow.iter_mut().zip(x.plane(ci, td)) {
                    *o += wt * xv;
                }
            }
        }
    }
    Ok(out)
}

pub fn depth_collapse_backward(
    x: &Tensor4,
    k: &Kernel5,
    grad_out: &Tensor3,
) -> Result<(Tensor4, Kernel5)> {
    collapse_check("depth_collapse_backward", x, k)?;
    let [cin, d, h, w] = x.shape();
    let cout = k.shape()[0];
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err(
            "depth_collapse_backward",
            format!(
                "grad_out {:?} vs output {:?}",
                grad_out.shape(),
                [cout, h, w]
            ),
        ));
    }
    let plane = h * w;
    let mut grad_x = Tensor4::zeros(x.shape())?;
    let mut grad_k = Kernel5::zeros(k.shape())?;
    for co in 0..cout {
        let grow = &grad_out.data()[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            for td in 0..d {
                let kidx = (co * cin + ci) * d + td;
                let wt = k.data()[kidx];
                let start = (ci * d + td) * plane;
                let xrow = &x.data()[start..start + plane];
                let mut acc = 0.0;
                let gx = &mut grad_x.data_mut()[start..start + plane];
                for ((gxv, gv), xv) in gx.iter_mut().zip(grow).zip(xrow) {
                    *gxv += wt * gv;
                    acc += gv * xv;
                }
                grad_k.data_mut()[kidx] = acc;
            }
        }
    }
    Ok((grad_x, grad_k))
}
