use super::{random_tensor, random_trained_state, OpDims};
use crate::backbone::{backward_features, build, forward_features, BackboneConfig};
use crate::error::{Error, Result};
use crate::operators::{backward, forward, OperatorKind, OperatorState};
use crate::rng::SeededRng;
use crate::tensor::{
    conv3d_backward, conv3d_forward, slice_contract_backward, slice_contract_forward, Dense,
    FusionWeightP, Kernel5, PadMode,
};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-5;
pub const MIN_SAMPLES_PER_TENSOR: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates redrawn because a step crossed a non-differentiable point.
    pub skipped: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let worst = self
            .worst
            .as_ref()
            .map(|(t, i)| format!(" worst {t}[{i}]"))
            .unwrap_or_default();
        let skipped = if self.skipped > 0 {
            format!(" ({} at kinks skipped)", self.skipped)
        } else {
            String::new()
        };
        format!(
            "max rel err {:.3e} over {} coords{worst}{skipped}",
            self.max_rel_error, self.coordinates
        )
    }
}

/// Compares analytic gradients with central differences.
///
/// `analytic` lists `(name, gradient)` per tensor. `loss(t, i, delta)` must
/// return the scalar loss with coordinate `i` of tensor `t` moved by
/// `delta`. Up to `samples` coordinates per tensor are drawn without
/// replacement (all of them when the tensor is smaller).
pub fn check_gradients<F>(
    op: &str,
    analytic: &[(&str, &[f64])],
    loss: F,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: FnMut(usize, usize, f64) -> Result<f64>,
{
    check_gradients_smooth(op, analytic, loss, |_, _| Ok(true), samples, rng)
}

/// As [`check_gradients`], for piecewise-smooth losses. `smooth(t, i)`
/// reports whether both steps of coordinate `i` stay on one smooth piece;
/// coordinates where it does not are replaced by further draws.
pub fn check_gradients_smooth<F, S>(
    op: &str,
    analytic: &[(&str, &[f64])],
    mut loss: F,
    mut smooth: S,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: FnMut(usize, usize, f64) -> Result<f64>,
    S: FnMut(usize, usize) -> Result<bool>,
{
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    let mut skipped = 0;
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..grad.len()).collect();
        rng.shuffle(&mut order);
        let mut picks = Vec::with_capacity(samples);
        for i in order {
            if picks.len() == samples {
                break;
            }
            if smooth(t, i)? {
                picks.push(i);
            } else {
                skipped += 1;
            }
        }
        picks.sort_unstable();
        for i in picks {
            let plus = loss(t, i, FD_STEP)?;
            let minus = loss(t, i, -FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = grad[i];
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{op}/{name}"),
                    index: i,
                });
            }
            let denom = exact.abs().max(numeric.abs()).max(1e-12);
            let rel = (exact - numeric).abs() / denom;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((name.to_string(), i));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_rel,
        coordinates,
        worst,
        skipped,
        passed: max_rel <= GRAD_CHECK_THRESHOLD,
    })
}

/// What [`grad_check`] differentiates.
#[derive(Debug, Clone, PartialEq)]
pub enum GradCheckTarget {
    Conv3d {
        input: [usize; 4],
        kernel: [usize; 5],
    },
    SliceContract {
        input: [usize; 4],
    },
    Operator {
        kind: OperatorKind,
        dims: OpDims,
    },
    /// The full feature extractor, weights as built plus small random biases.
    Backbone(BackboneConfig),
}

impl GradCheckTarget {
    pub fn name(&self) -> String {
        match self {
            GradCheckTarget::Conv3d { input, kernel } => format!("conv3d {input:?}*{kernel:?}"),
            GradCheckTarget::SliceContract { input } => format!("slice_contract {input:?}"),
            GradCheckTarget::Operator { kind, .. } => format!("operator {kind}"),
            GradCheckTarget::Backbone(cfg) => {
                format!("backbone {} [{}]", cfg.fusion, cfg.stages_text())
            }
        }
    }
}

fn with_delta<const N: usize>(t: &Dense<N>, i: usize, delta: f64) -> Dense<N> {
    let mut out = t.clone();
    out.data_mut()[i] += delta;
    out
}

/// Random instance of `target`, loss `<g, f(inputs)>` with random `g`,
/// checked at [`MIN_SAMPLES_PER_TENSOR`] coordinates per tensor.
pub fn grad_check(target: &GradCheckTarget, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let op = target.name();
    let samples = MIN_SAMPLES_PER_TENSOR;
    match target {
        GradCheckTarget::Conv3d { input, kernel } => {
            let x = random_tensor(*input, rng)?;
            let k = Kernel5::from_fn(*kernel, |_| rng.uniform(-1.0, 1.0))?;
            let y = conv3d_forward(&x, &k, PadMode::SamePadZero)?;
            let g = random_tensor(y.shape(), rng)?;
            let (gx, gk) = conv3d_backward(&x, &k, &g)?;
            check_gradients(
                &op,
                &[("x", gx.data()), ("kernel", gk.data())],
                |t, i, dlt| {
                    let y = if t == 0 {
                        conv3d_forward(&with_delta(&x, i, dlt), &k, PadMode::SamePadZero)?
                    } else {
                        conv3d_forward(&x, &with_delta(&k, i, dlt), PadMode::SamePadZero)?
                    };
                    y.dot(&g)
                },
                samples,
                rng,
            )
        }
        GradCheckTarget::SliceContract { input } => {
            let [c, d, _, _] = *input;
            let x = random_tensor(*input, rng)?;
            let p = FusionWeightP::new(Dense::from_fn([d, d, c], |_| rng.uniform(-1.0, 1.0))?)?;
            let g = random_tensor(*input, rng)?;
            let (gx, gp) = slice_contract_backward(&x, &p, &g)?;
            check_gradients(
                &op,
                &[("x", gx.data()), ("p", gp.as_dense().data())],
                |t, i, dlt| {
                    let y = if t == 0 {
                        slice_contract_forward(&with_delta(&x, i, dlt), &p)?
                    } else {
                        let p2 = FusionWeightP::new(with_delta(p.as_dense(), i, dlt))?;
                        slice_contract_forward(&x, &p2)?
                    };
                    y.dot(&g)
                },
                samples,
                rng,
            )
        }
        GradCheckTarget::Operator { kind, dims } => {
            let state = random_trained_state(*kind, dims, rng)?;
            check_operator(&op, &state, dims, rng, backward)
        }
        GradCheckTarget::Backbone(cfg) => {
            let mut b = build(cfg)?;
            for st in &mut b.stages {
                for layer in &mut st.layers {
                    for v in &mut layer.bias {
                        *v = rng.uniform(-0.1, 0.1);
                    }
                }
            }
            let x = random_tensor([1, cfg.depth, cfg.height, cfg.width], rng)?;
            let map = forward_features(&b, &x)?;
            let g = Dense::from_fn(map.shape(), |_| rng.uniform(-1.0, 1.0))?;
            let grads = backward_features(&b, &x, &g)?;
            let owned: Vec<(String, &[f64])> = grads.params();
            let analytic: Vec<(&str, &[f64])> =
                owned.iter().map(|(n, v)| (n.as_str(), *v)).collect();
            let moved = |t: usize, i: usize, dlt: f64| {
                let mut m = b.clone();
                m.params_mut()[t].1[i] += dlt;
                m
            };
            let base = b.forward_traced(&x)?.1.relu_pattern();
            check_gradients_smooth(
                &op,
                &analytic,
                |t, i, dlt| forward_features(&moved(t, i, dlt), &x)?.dot(&g),
                |t, i| {
                    for dlt in [FD_STEP, -FD_STEP] {
                        if moved(t, i, dlt).forward_traced(&x)?.1.relu_pattern() != base {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                },
                samples,
                rng,
            )
        }
    }
}

/// Gradient check of an operator with a caller-supplied backward, so tests
/// can inject a broken one.
pub(crate) fn check_operator<B>(
    op: &str,
    state: &OperatorState,
    dims: &OpDims,
    rng: &mut SeededRng,
    backward_fn: B,
) -> Result<GradCheckReport>
where
    B: Fn(
        &OperatorState,
        &crate::tensor::Tensor4,
        &crate::tensor::Tensor4,
    ) -> Result<(crate::tensor::Tensor4, OperatorState)>,
{
    let x = random_tensor(dims.input_shape(), rng)?;
    let g = random_tensor(dims.output_shape(), rng)?;
    let (gx, grads) = backward_fn(state, &x, &g)?;
    let mut analytic: Vec<(&str, &[f64])> = vec![("x", gx.data())];
    analytic.extend(grads.params());
    check_gradients(
        op,
        &analytic,
        |t, i, dlt| {
            if t == 0 {
                forward(state, &with_delta(&x, i, dlt))?.dot(&g)
            } else {
                let mut s = state.clone();
                s.params_mut()[t - 1].1[i] += dlt;
                forward(&s, &x)?.dot(&g)
            }
        },
        MIN_SAMPLES_PER_TENSOR,
        rng,
    )
}
