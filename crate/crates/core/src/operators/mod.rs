//! The six 3D context fusion operators behind one interface.
//!
//! Every operator is built from a 2D kernel `(Cout, Cin, K, K)` by
//! [`inflate`] and maps `(Cin, D, H, W)` to `(Cout, D, H, W)`:
//!
//! | kind       | weights                                   | forward                          |
//! |------------|-------------------------------------------|----------------------------------|
//! | `NoFusion` | `1 x K x K`                               | slice-wise conv                  |
//! | `I3d`      | `K x K x K`, each axial tap `W/K`          | full 3D conv                     |
//! | `P3d`      | `1 x K x K` then `Cout x Cout x K x 1 x 1` | planar conv, then axial conv     |
//! | `Acs`      | three views of the kernel rows            | axial/coronal/sagittal, concat   |
//! | `Tsm`      | `1 x K x K` + channel shift splits         | shift, then slice-wise conv      |
//! | `A3d`      | `1 x K x K` + per-channel `D x D` mixing   | slice contraction, then conv     |

mod manifest;

pub use manifest::{load_operator, save_operator, OperatorManifest};

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{
    axial_shift, axial_shift_adjoint, conv3d_backward, conv3d_forward, slice_contract_backward,
    slice_contract_forward, Dense, Kernel5, PadMode, Tensor4,
};

pub use crate::tensor::FusionWeightP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    NoFusion,
    I3d,
    P3d,
    Acs,
    Tsm,
    A3d,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 6] = [
        OperatorKind::NoFusion,
        OperatorKind::I3d,
        OperatorKind::P3d,
        OperatorKind::Acs,
        OperatorKind::Tsm,
        OperatorKind::A3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::NoFusion => "nofusion",
            OperatorKind::I3d => "i3d",
            OperatorKind::P3d => "p3d",
            OperatorKind::Acs => "acs",
            OperatorKind::Tsm => "tsm",
            OperatorKind::A3d => "a3d",
        }
    }

    /// Axial receptive-field radius: how many slices on each side an output
    /// slice can see. `None` means the whole depth.
    pub fn axial_radius(self, k: usize) -> Option<usize> {
        match self {
            OperatorKind::NoFusion => Some(0),
            OperatorKind::I3d | OperatorKind::P3d | OperatorKind::Acs => Some(k / 2),
            OperatorKind::Tsm => Some(1),
            OperatorKind::A3d => None,
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown fusion kind {s:?}")))
    }
}

/// A 2D convolution kernel `(Cout, Cin, K, K)` with odd `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D(Dense<4>);

impl Kernel2D {
    pub fn new(inner: Dense<4>) -> Result<Self> {
        let [_, _, kh, kw] = inner.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err(
                "Kernel2D::new",
                format!("kernel must be K x K with odd K, got {kh}x{kw}"),
            ));
        }
        Ok(Self(inner))
    }

    /// He-style initialization: `N(0, 2 / (Cin K^2))`.
    pub fn he(cout: usize, cin: usize, k: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::new(Dense::from_fn([cout, cin, k, k], |_| std * rng.normal())?)
    }

    pub fn cout(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cin(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn as_dense(&self) -> &Dense<4> {
        &self.0
    }

    /// `(Cout, Cin, 1, K, K)`.
    pub fn unsqueeze(&self) -> Kernel5 {
        let [co, ci, k, _] = self.0.shape();
        Kernel5::from_vec([co, ci, 1, k, k], self.0.data().to_vec()).expect("same length")
    }

    /// Rows `[start, start + count)` as a `(count, Cin, K, K)` block.
    fn rows(&self, start: usize, count: usize) -> Vec<f64> {
        let block = self.cin() * self.k() * self.k();
        self.0.data()[start * block..(start + count) * block].to_vec()
    }
}

/// Knobs for [`inflate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflateOptions {
    /// TSM shifts `floor(Cin / shift_divisor)` channels in each direction.
    pub shift_divisor: usize,
    /// A3D mixing weights start at `I + U[-perturbation, perturbation]`.
    pub perturbation: f64,
}

impl Default for InflateOptions {
    fn default() -> Self {
        Self {
            shift_divisor: 8,
            perturbation: 0.1,
        }
    }
}

/// Weights of one fusion operator. Kernel layouts are `(Cout, Cin, Kd, Kh, Kw)`.
///
/// The same type doubles as the gradient container returned by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorState {
    NoFusion {
        kernel: Kernel5,
    },
    I3d {
        kernel: Kernel5,
    },
    P3d {
        planar: Kernel5,
        axial: Kernel5,
    },
    Acs {
        axial: Kernel5,
        coronal: Kernel5,
        sagittal: Kernel5,
    },
    Tsm {
        kernel: Kernel5,
        up: usize,
        down: usize,
    },
    A3d {
        kernel: Kernel5,
        p: FusionWeightP,
    },
}

/// Partitions `c_out` channels over the axial, coronal and sagittal views,
/// ceiling first.
pub fn acs_split(c_out: usize) -> Result<(usize, usize, usize)> {
    if c_out < 3 {
        return Err(Error::Invalid(format!(
            "ACS needs at least 3 output channels, got {c_out}"
        )));
    }
    let a = c_out.div_ceil(3);
    let c = (c_out - a).div_ceil(2);
    Ok((a, c, c_out - a - c))
}

pub fn inflate(
    kind: OperatorKind,
    w2d: &Kernel2D,
    depth: usize,
    rng: &mut SeededRng,
) -> Result<OperatorState> {
    inflate_with(kind, w2d, depth, rng, &InflateOptions::default())
}

/// Builds an operator from a 2D kernel. Only A3D consumes randomness.
pub fn inflate_with(
    kind: OperatorKind,
    w2d: &Kernel2D,
    depth: usize,
    rng: &mut SeededRng,
    opts: &InflateOptions,
) -> Result<OperatorState> {
    if depth < 1 {
        return Err(Error::Invalid("depth must be at least 1".into()));
    }
    let (co, ci, k) = (w2d.cout(), w2d.cin(), w2d.k());
    let state = match kind {
        OperatorKind::NoFusion => OperatorState::NoFusion {
            kernel: w2d.unsqueeze(),
        },
        OperatorKind::I3d => {
            let scale = k as f64;
            let kernel = Kernel5::from_fn([co, ci, k, k, k], |[o, i, _, h, w]| {
                w2d.as_dense().get([o, i, h, w]) / scale
            })?;
            OperatorState::I3d { kernel }
        }
        OperatorKind::P3d => {
            let axial = Kernel5::from_fn([co, co, k, 1, 1], |[o, i, t, _, _]| {
                if o == i && t == k / 2 {
                    1.0
                } else {
                    0.0
                }
            })?;
            OperatorState::P3d {
                planar: w2d.unsqueeze(),
                axial,
            }
        }
        OperatorKind::Acs => {
            let (a, c, s) = acs_split(co)?;
            OperatorState::Acs {
                axial: Kernel5::from_vec([a, ci, 1, k, k], w2d.rows(0, a))?,
                coronal: Kernel5::from_vec([c, ci, k, 1, k], w2d.rows(a, c))?,
                sagittal: Kernel5::from_vec([s, ci, k, k, 1], w2d.rows(a + c, s))?,
            }
        }
        OperatorKind::Tsm => {
            if opts.shift_divisor == 0 {
                return Err(Error::Invalid("shift divisor must be positive".into()));
            }
            let split = ci / opts.shift_divisor;
            OperatorState::Tsm {
                kernel: w2d.unsqueeze(),
                up: split,
                down: split,
            }
        }
        OperatorKind::A3d => {
            let eps = opts.perturbation;
            let p = Dense::from_fn([depth, depth, ci], |[d, j, _]| {
                let base = if d == j { 1.0 } else { 0.0 };
                if eps == 0.0 {
                    base
                } else {
                    base + rng.uniform(-eps, eps)
                }
            })?;
            OperatorState::A3d {
                kernel: w2d.unsqueeze(),
                p: FusionWeightP::new(p)?,
            }
        }
    };
    Ok(state)
}

impl OperatorState {
    pub fn kind(&self) -> OperatorKind {
        match self {
            OperatorState::NoFusion { .. } => OperatorKind::NoFusion,
            OperatorState::I3d { .. } => OperatorKind::I3d,
            OperatorState::P3d { .. } => OperatorKind::P3d,
            OperatorState::Acs { .. } => OperatorKind::Acs,
            OperatorState::Tsm { .. } => OperatorKind::Tsm,
            OperatorState::A3d { .. } => OperatorKind::A3d,
        }
    }

    fn lead_kernel(&self) -> &Kernel5 {
        match self {
            OperatorState::NoFusion { kernel }
            | OperatorState::I3d { kernel }
            | OperatorState::Tsm { kernel, .. }
            | OperatorState::A3d { kernel, .. } => kernel,
            OperatorState::P3d { planar, .. } => planar,
            OperatorState::Acs { axial, .. } => axial,
        }
    }

    pub fn cin(&self) -> usize {
        self.lead_kernel().shape()[1]
    }

    pub fn cout(&self) -> usize {
        match self {
            OperatorState::Acs {
                axial,
                coronal,
                sagittal,
            } => axial.shape()[0] + coronal.shape()[0] + sagittal.shape()[0],
            _ => self.lead_kernel().shape()[0],
        }
    }

    /// Planar kernel size `K`.
    pub fn kernel_size(&self) -> usize {
        self.lead_kernel().shape()[4]
    }

    /// The depth this operator is tied to; only A3D has one.
    pub fn depth_hint(&self) -> Option<usize> {
        match self {
            OperatorState::A3d { p, .. } => Some(p.depth()),
            _ => None,
        }
    }

    /// Weight tensors in a fixed order, as flat slices.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            OperatorState::NoFusion { kernel }
            | OperatorState::I3d { kernel }
            | OperatorState::Tsm { kernel, .. } => vec![("kernel", kernel.data())],
            OperatorState::P3d { planar, axial } => {
                vec![("planar", planar.data()), ("axial", axial.data())]
            }
            OperatorState::Acs {
                axial,
                coronal,
                sagittal,
            } => vec![
                ("axial", axial.data()),
                ("coronal", coronal.data()),
                ("sagittal", sagittal.data()),
            ],
            OperatorState::A3d { kernel, p } => {
                vec![("kernel", kernel.data()), ("p", p.as_dense().data())]
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            OperatorState::NoFusion { kernel }
            | OperatorState::I3d { kernel }
            | OperatorState::Tsm { kernel, .. } => vec![("kernel", kernel.data_mut())],
            OperatorState::P3d { planar, axial } => {
                vec![("planar", planar.data_mut()), ("axial", axial.data_mut())]
            }
            OperatorState::Acs {
                axial,
                coronal,
                sagittal,
            } => vec![
                ("axial", axial.data_mut()),
                ("coronal", coronal.data_mut()),
                ("sagittal", sagittal.data_mut()),
            ],
            OperatorState::A3d { kernel, p } => {
                vec![("kernel", kernel.data_mut()), ("p", p.data_mut())]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// In-place `self += alpha * other`; both must share a layout.
    pub fn add_scaled(&mut self, alpha: f64, other: &OperatorState) -> Result<()> {
        if self.kind() != other.kind() {
            return Err(Error::Invalid(format!(
                "cannot combine {} with {}",
                self.kind(),
                other.kind()
            )));
        }
        let theirs = other.params();
        for ((name, mine), (_, rhs)) in self.params_mut().into_iter().zip(theirs) {
            if mine.len() != rhs.len() {
                return Err(shape_err("add_scaled", format!("{name} length mismatch")));
            }
            for (a, b) in mine.iter_mut().zip(rhs) {
                *a += alpha * b;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4, op: &'static str) -> Result<()> {
        if x.channels() != self.cin() {
            return Err(shape_err(
                op,
                format!(
                    "{} expects {} input channels, got {}",
                    self.kind(),
                    self.cin(),
                    x.channels()
                ),
            ));
        }
        if let Some(depth) = self.depth_hint() {
            if x.depth() != depth {
                return Err(shape_err(
                    op,
                    format!("a3d built for depth {depth}, input has depth {}", x.depth()),
                ));
            }
        }
        Ok(())
    }
}

const SAME: PadMode = PadMode::SamePadZero;

pub fn forward(state: &OperatorState, x: &Tensor4) -> Result<Tensor4> {
    state.check_input(x, "forward")?;
    match state {
        OperatorState::NoFusion { kernel } | OperatorState::I3d { kernel } => {
            conv3d_forward(x, kernel, SAME)
        }
        OperatorState::P3d { planar, axial } => {
            conv3d_forward(&conv3d_forward(x, planar, SAME)?, axial, SAME)
        }
        OperatorState::Acs {
            axial,
            coronal,
            sagittal,
        } => {
            let a = conv3d_forward(x, axial, SAME)?;
            let c = conv3d_forward(x, coronal, SAME)?;
            let s = conv3d_forward(x, sagittal, SAME)?;
            Tensor4::concat_channels(&[&a, &c, &s])
        }
        OperatorState::Tsm { kernel, up, down } => {
            conv3d_forward(&axial_shift(x, *up, *down)?, kernel, SAME)
        }
        OperatorState::A3d { kernel, p } => {
            conv3d_forward(&slice_contract_forward(x, p)?, kernel, SAME)
        }
    }
}

/// Gradients of `<grad_out, forward(state, x)>` with respect to `x` and to
/// every weight; weight gradients come back in an [`OperatorState`] of the
/// same kind and layout.
pub fn backward(
    state: &OperatorState,
    x: &Tensor4,
    grad_out: &Tensor4,
) -> Result<(Tensor4, OperatorState)> {
    state.check_input(x, "backward")?;
    let [_, d, h, w] = x.shape();
    if grad_out.shape() != [state.cout(), d, h, w] {
        return Err(shape_err(
            "backward",
            format!(
                "grad_out {:?} does not match output {:?}",
                grad_out.shape(),
                [state.cout(), d, h, w]
            ),
        ));
    }
    match state {
        OperatorState::NoFusion { kernel } => {
            let (gx, gk) = conv3d_backward(x, kernel, grad_out)?;
            Ok((gx, OperatorState::NoFusion { kernel: gk }))
        }
        OperatorState::I3d { kernel } => {
            let (gx, gk) = conv3d_backward(x, kernel, grad_out)?;
            Ok((gx, OperatorState::I3d { kernel: gk }))
        }
        OperatorState::P3d { planar, axial } => {
            let mid = conv3d_forward(x, planar, SAME)?;
            let (g_mid, g_axial) = conv3d_backward(&mid, axial, grad_out)?;
            let (gx, g_planar) = conv3d_backward(x, planar, &g_mid)?;
            Ok((
                gx,
                OperatorState::P3d {
                    planar: g_planar,
                    axial: g_axial,
                },
            ))
        }
        OperatorState::Acs {
            axial,
            coronal,
            sagittal,
        } => {
            let na = axial.shape()[0];
            let nc = coronal.shape()[0];
            let ns = sagittal.shape()[0];
            let (gxa, ga) = conv3d_backward(x, axial, &grad_out.channel_range(0, na)?)?;
            let (gxc, gc) = conv3d_backward(x, coronal, &grad_out.channel_range(na, nc)?)?;
            let (gxs, gs) = conv3d_backward(x, sagittal, &grad_out.channel_range(na + nc, ns)?)?;
            let gx = gxa.add(&gxc)?.add(&gxs)?;
            Ok((
                gx,
                OperatorState::Acs {
                    axial: ga,
                    coronal: gc,
                    sagittal: gs,
                },
            ))
        }
        OperatorState::Tsm { kernel, up, down } => {
            let shifted = axial_shift(x, *up, *down)?;
            let (g_shifted, gk) = conv3d_backward(&shifted, kernel, grad_out)?;
            let gx = axial_shift_adjoint(&g_shifted, *up, *down)?;
            Ok((
                gx,
                OperatorState::Tsm {
                    kernel: gk,
                    up: *up,
                    down: *down,
                },
            ))
        }
        OperatorState::A3d { kernel, p } => {
            let mixed = slice_contract_forward(x, p)?;
            let (g_mixed, gk) = conv3d_backward(&mixed, kernel, grad_out)?;
            let (gx, gp) = slice_contract_backward(x, p, &g_mixed)?;
            Ok((gx, OperatorState::A3d { kernel: gk, p: gp }))
        }
    }
}

#[cfg(test)]
mod tests;
