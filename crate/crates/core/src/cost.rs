//! Exact parameter and multiply-accumulate accounting.
//!
//! Counts are integers; overheads relative to no fusion are exact rationals.
//! Shifts and copies cost nothing; bias, pooling and normalization are not
//! counted. FLOPs, when asked for, are `2 * MACs`.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::operators::{acs_split, OperatorKind};

pub type Rational = Ratio<u128>;

/// Dimensions of one fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerDims {
    pub fn validate(&self, kind: OperatorKind) -> Result<()> {
        let LayerDims {
            c_in,
            c_out,
            k,
            d,
            h,
            w,
        } = *self;
        if [c_in, c_out, k, d, h, w].contains(&0) {
            return Err(Error::Invalid(format!(
                "layer dims must be positive: {self:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("kernel size must be odd, got {k}")));
        }
        if kind == OperatorKind::Acs {
            acs_split(c_out)?;
        }
        Ok(())
    }

    fn u(&self) -> [u128; 6] {
        [self.c_in, self.c_out, self.k, self.d, self.h, self.w].map(|v| v as u128)
    }
}

pub fn count_params(kind: OperatorKind, dims: &LayerDims) -> Result<u128> {
    dims.validate(kind)?;
    let [ci, co, k, d, _, _] = dims.u();
    let base = co * ci * k * k;
    Ok(match kind {
        OperatorKind::NoFusion | OperatorKind::Acs | OperatorKind::Tsm => base,
        OperatorKind::I3d => base * k,
        OperatorKind::P3d => base + co * co * k,
        OperatorKind::A3d => base + d * d * ci,
    })
}

pub fn count_macs(kind: OperatorKind, dims: &LayerDims) -> Result<u128> {
    dims.validate(kind)?;
    let [ci, co, k, d, h, w] = dims.u();
    let voxels = d * h * w;
    let base = voxels * co * ci * k * k;
    Ok(match kind {
        OperatorKind::NoFusion | OperatorKind::Acs | OperatorKind::Tsm => base,
        OperatorKind::I3d => base * k,
        OperatorKind::P3d => base + voxels * co * co * k,
        OperatorKind::A3d => base + d * voxels * ci,
    })
}

pub fn param_overhead(kind: OperatorKind, dims: &LayerDims) -> Result<Rational> {
    Ok(Rational::new(
        count_params(kind, dims)?,
        count_params(OperatorKind::NoFusion, dims)?,
    ))
}

pub fn mac_overhead(kind: OperatorKind, dims: &LayerDims) -> Result<Rational> {
    Ok(Rational::new(
        count_macs(kind, dims)?,
        count_macs(OperatorKind::NoFusion, dims)?,
    ))
}

/// The closed-form overhead expressions, written directly in the symbols.
pub mod closed_form {
    use super::{LayerDims, OperatorKind, Rational};

    fn parts(d: &LayerDims) -> (u128, u128, u128, u128) {
        (d.c_in as u128, d.c_out as u128, d.k as u128, d.d as u128)
    }

    /// `1`, `K`, `1 + Co/(Ci K)`, `1`, `1`, `1 + D^2/(Co K^2)`.
    pub fn params(kind: OperatorKind, dims: &LayerDims) -> Rational {
        let (ci, co, k, d) = parts(dims);
        let one = Rational::from_integer(1);
        match kind {
            OperatorKind::NoFusion | OperatorKind::Acs | OperatorKind::Tsm => one,
            OperatorKind::I3d => Rational::from_integer(k),
            OperatorKind::P3d => one + Rational::new(co, ci * k),
            OperatorKind::A3d => one + Rational::new(d * d, co * k * k),
        }
    }

    /// `1`, `K`, `1 + Co/(Ci K)`, `1`, `1`, `1 + D/(Co K^2)`.
    pub fn macs(kind: OperatorKind, dims: &LayerDims) -> Rational {
        let (ci, co, k, d) = parts(dims);
        let one = Rational::from_integer(1);
        match kind {
            OperatorKind::NoFusion | OperatorKind::Acs | OperatorKind::Tsm => one,
            OperatorKind::I3d => Rational::from_integer(k),
            OperatorKind::P3d => one + Rational::new(co, ci * k),
            OperatorKind::A3d => one + Rational::new(d, co * k * k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub dims: LayerDims,
    pub params: u128,
    pub macs: u128,
    pub overhead_params: Rational,
    pub overhead_macs: Rational,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub kind: OperatorKind,
    pub layers: Vec<LayerCost>,
    pub params: u128,
    pub macs: u128,
    pub overhead_params: Rational,
    pub overhead_macs: Rational,
}

/// Display unit for MAC totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Unit {
    #[default]
    Macs,
    Flops,
}

impl Unit {
    pub fn factor(self) -> u128 {
        match self {
            Unit::Macs => 1,
            Unit::Flops => 2,
        }
    }

    pub fn giga_label(self) -> &'static str {
        match self {
            Unit::Macs => "GMACs",
            Unit::Flops => "GFLOPs",
        }
    }
}

/// `count / 1e9` rounded half-up to two decimals, computed on integers.
pub fn giga_two_decimals(count: u128) -> String {
    let centi = (count + 5_000_000) / 10_000_000;
    format!("{}.{:02}", centi / 100, centi % 100)
}

impl CostReport {
    pub fn total(&self, unit: Unit) -> u128 {
        self.macs * unit.factor()
    }

    pub fn giga(&self, unit: Unit) -> String {
        giga_two_decimals(self.total(unit))
    }
}

pub fn backbone_cost(kind: OperatorKind, layers: &[LayerDims]) -> Result<CostReport> {
    if layers.is_empty() {
        return Err(Error::Invalid(
            "backbone_cost needs at least one layer".into(),
        ));
    }
    let mut out = Vec::with_capacity(layers.len());
    let (mut params, mut macs, mut base_params, mut base_macs) = (0, 0, 0, 0);
    for dims in layers {
        let layer = LayerCost {
            dims: *dims,
            params: count_params(kind, dims)?,
            macs: count_macs(kind, dims)?,
            overhead_params: param_overhead(kind, dims)?,
            overhead_macs: mac_overhead(kind, dims)?,
        };
        params += layer.params;
        macs += layer.macs;
        base_params += count_params(OperatorKind::NoFusion, dims)?;
        base_macs += count_macs(OperatorKind::NoFusion, dims)?;
        out.push(layer);
    }
    Ok(CostReport {
        kind,
        layers: out,
        params,
        macs,
        overhead_params: Rational::new(params, base_params),
        overhead_macs: Rational::new(macs, base_macs),
    })
}

fn ratio_text(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// `1+7/576` style: integer part plus the reduced remainder.
fn ratio_mixed(r: &Rational) -> String {
    let whole = r.to_integer();
    let rest = r - Rational::from_integer(whole);
    if rest == Rational::from_integer(0) {
        whole.to_string()
    } else {
        format!("{whole}+{}/{}", rest.numer(), rest.denom())
    }
}

fn ratio_decimal(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Column-aligned table, one block per report.
pub fn render_table(reports: &[CostReport], unit: Unit) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "== {} ==", r.kind);
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>5} {:>2} {:>2} {:>5} {:>12} {:>16} {:>20} {:>20}",
            "layer",
            "c_in",
            "c_out",
            "k",
            "d",
            "hxw",
            "params",
            "macs",
            "overhead_params",
            "overhead_macs"
        );
        for (i, l) in r.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>5} {:>5} {:>5} {:>2} {:>2} {:>5} {:>12} {:>16} {:>20} {:>20}",
                i,
                l.dims.c_in,
                l.dims.c_out,
                l.dims.k,
                l.dims.d,
                format!("{}x{}", l.dims.h, l.dims.w),
                l.params,
                l.macs,
                format!(
                    "{} ({:.4})",
                    ratio_mixed(&l.overhead_params),
                    ratio_decimal(&l.overhead_params)
                ),
                format!(
                    "{} ({:.4})",
                    ratio_mixed(&l.overhead_macs),
                    ratio_decimal(&l.overhead_macs)
                ),
            );
        }
        let _ = writeln!(
            out,
            "total params {}  total {} {}  overhead params {:.4}  overhead macs {:.4}",
            r.params,
            unit.giga_label(),
            r.giga(unit),
            ratio_decimal(&r.overhead_params),
            ratio_decimal(&r.overhead_macs),
        );
    }
    out
}

/// `kind,layer,params,macs,overhead_params,overhead_macs`, overheads as
/// exact fractions. With `Unit::Flops` the `macs` column holds FLOPs.
pub fn render_csv(reports: &[CostReport], unit: Unit) -> String {
    let mut out = String::from("kind,layer,params,macs,overhead_params,overhead_macs\n");
    for r in reports {
        for (i, l) in r.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.kind,
                i,
                l.params,
                l.macs * unit.factor(),
                ratio_text(&l.overhead_params),
                ratio_text(&l.overhead_macs)
            );
        }
    }
    out
}
