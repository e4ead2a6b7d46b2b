use super::Tensor4;
use crate::error::{Error, Result};

/// Channel-split slice shifting along depth.
///
/// Channels `[0, up)` shift up: output slice `d` reads input slice `d + 1`,
/// the last slice is zero-filled. Channels `[up, up + down)` shift down:
/// output slice `d` reads `d - 1`, the first slice is zero-filled. Remaining
/// channels pass through.
pub fn axial_shift(x: &Tensor4, up: usize, down: usize) -> Result<Tensor4> {
    shift_impl(x, up, down, false)
}

/// Adjoint of [`axial_shift`]: the up block moves down and vice versa.
pub fn axial_shift_adjoint(g: &Tensor4, up: usize, down: usize) -> Result<Tensor4> {
    shift_impl(g, up, down, true)
}

fn shift_impl(x: &Tensor4, up: usize, down: usize, adjoint: bool) -> Result<Tensor4> {
    let [c, d, _, _] = x.shape();
    if up + down > c {
        return Err(Error::Invalid(format!(
            "shift splits ({up}, {down}) exceed {c} channels"
        )));
    }
    let mut out = x.clone();
    for ch in 0..up + down {
        let step: isize = if (ch < up) != adjoint { 1 } else { -1 };
        copy_shifted(x, &mut out, ch, d, step);
    }
    Ok(out)
}

// out[ch, k] = x[ch, k + step], zero outside [0, d).
fn copy_shifted(x: &Tensor4, out: &mut Tensor4, ch: usize, d: usize, step: isize) {
    let plane = x.plane(0, 0).len();
    for k in 0..d {
        let src = k as isize + step;
        let start = (ch * d + k) * plane;
        let dst = &mut out.data_mut()[start..start + plane];
        if src < 0 || src >= d as isize {
            dst.fill(0.0);
        } else {
            dst.copy_from_slice(x.plane(ch, src as usize));
        }
    }
}

/// Moves every slice by `s` along depth (`out[d] = x[d - s]`), zero-filling
/// slices that would read outside the volume.
pub fn shift_slices(x: &Tensor4, s: isize) -> Result<Tensor4> {
    let [c, d, _, _] = x.shape();
    if s.unsigned_abs() >= d {
        return Err(Error::Invalid(format!(
            "slice shift {s} must be smaller than depth {d}"
        )));
    }
    let mut out = x.clone();
    for ch in 0..c {
        copy_shifted(x, &mut out, ch, d, -s);
    }
    Ok(out)
}
