//! A small multi-scale 3D feature extractor with a pluggable fusion operator.
//!
//! Stage `i` runs at `1 / 2^i` of the input resolution (a 2x2 average pool
//! opens every stage after the first) and stacks `blocks` fusion layers,
//! each followed by a bias and ReLU. Every stage output is mapped to the
//! feature width by a `1x1x1` unification kernel, upsampled back to full
//! resolution by nearest-neighbour repetition, and the results are summed.
//! A valid `D x 1 x 1` convolution then collapses depth, leaving a
//! `(C_feat, H, W)` map.

use std::fs;
use std::path::Path;

use crate::cost::LayerDims;
use crate::error::{shape_err, Error, Result};
use crate::kv::KvMap;
use crate::operators::{
    backward, forward, inflate_with, load_operator, save_operator, InflateOptions, Kernel2D,
    OperatorKind, OperatorState,
};
use crate::rng::SeededRng;
use crate::tensor::{
    conv3d_backward, conv3d_forward, depth_collapse_backward, depth_collapse_forward, io, Kernel5,
    PadMode, Tensor3, Tensor4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub stages: Vec<StageSpec>,
    pub fusion: OperatorKind,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub inflate: InflateOptions,
}

impl Default for BackboneConfig {
    /// Three single-block stages of 64, 128 and 256 channels on `3 x 32 x 32`.
    fn default() -> Self {
        Self {
            depth: 3,
            stages: vec![
                StageSpec {
                    channels: 64,
                    blocks: 1,
                },
                StageSpec {
                    channels: 128,
                    blocks: 1,
                },
                StageSpec {
                    channels: 256,
                    blocks: 1,
                },
            ],
            fusion: OperatorKind::NoFusion,
            seed: 0,
            height: 32,
            width: 32,
            kernel_size: 3,
            inflate: InflateOptions::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return bad("depth, height and width must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return bad(format!("stage {i} needs positive channels and blocks"));
            }
            if s.channels < prev {
                return bad(format!(
                    "stage {i} channels decrease ({prev} -> {})",
                    s.channels
                ));
            }
            if self.fusion == OperatorKind::Acs && s.channels < 3 {
                return bad("acs needs at least 3 channels per stage".into());
            }
            prev = s.channels;
        }
        let factor = self.downsample_factor();
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return bad(format!(
                "input {}x{} not divisible by downsampling factor {factor}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Dimensions of every fusion layer, in evaluation order.
    pub fn fusion_layers(&self) -> Vec<LayerDims> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, s) in self.stages.iter().enumerate() {
            for _ in 0..s.blocks {
                out.push(LayerDims {
                    c_in,
                    c_out: s.channels,
                    k: self.kernel_size,
                    d: self.depth,
                    h: self.height >> i,
                    w: self.width >> i,
                });
                c_in = s.channels;
            }
        }
        out
    }

    pub fn stages_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}x{}", s.channels, s.blocks))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses `channels x blocks` pairs such as `8x1,16x2`.
    pub fn parse_stages(text: &str) -> Result<Vec<StageSpec>> {
        text.split(',')
            .map(|part| {
                let (c, b) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::Invalid(format!("bad stage {part:?}, expected CxB")))?;
                let num = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Invalid(format!("bad stage {part:?}")))
                };
                Ok(StageSpec {
                    channels: num(c)?,
                    blocks: num(b)?,
                })
            })
            .collect()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("depth", self.depth);
        kv.insert("stages", self.stages_text());
        kv.insert("fusion", self.fusion);
        kv.insert("seed", self.seed);
        kv.insert("height", self.height);
        kv.insert("width", self.width);
        kv.insert("k", self.kernel_size);
        kv.insert("shift_divisor", self.inflate.shift_divisor);
        kv.insert("perturbation", self.inflate.perturbation);
        kv
    }

    /// Reads the keys written by [`Self::to_kv`]; missing keys keep `base`.
    pub fn from_kv(kv: &KvMap, base: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            depth: kv.parse_or("depth", base.depth)?,
            stages: match kv.get("stages") {
                Some(s) => Self::parse_stages(s)?,
                None => base.stages.clone(),
            },
            fusion: match kv.get("fusion") {
                Some(f) => f.parse()?,
                None => base.fusion,
            },
            seed: kv.parse_or("seed", base.seed)?,
            height: kv.parse_or("height", base.height)?,
            width: kv.parse_or("width", base.width)?,
            kernel_size: kv.parse_or("k", base.kernel_size)?,
            inflate: InflateOptions {
                shift_divisor: kv.parse_or("shift_divisor", base.inflate.shift_divisor)?,
                perturbation: kv.parse_or("perturbation", base.inflate.perturbation)?,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub op: OperatorState,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Whether a 2x2 average pool precedes the layers.
    pub downsample: bool,
    pub layers: Vec<FusionLayer>,
    /// `(C_feat, C_stage, 1, 1, 1)`.
    pub unify: Kernel5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    /// `(C_feat, C_feat, D, 1, 1)`, applied without padding.
    pub collapse: Kernel5,
}

const KERNEL_STREAM: u64 = 1;
const MIXING_STREAM: u64 = 2;
const UNIFY_STREAM: u64 = 3;
const COLLAPSE_STREAM: u64 = 4;

fn he_kernel5(shape: [usize; 5], rng: &mut SeededRng) -> Result<Kernel5> {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    let std = (2.0 / fan_in as f64).sqrt();
    Kernel5::from_fn(shape, |_| std * rng.normal())
}

/// Builds a backbone. 2D kernels come from streams that depend only on the
/// seed and layer position, so backbones differing only in `fusion` start
/// from the same 2D weights.
pub fn build(config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let cfeat = config.feature_channels();
    let k = config.kernel_size;
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut c_in = 1;
    let mut layer_index = 0u64;
    for (i, spec) in config.stages.iter().enumerate() {
        let mut layers = Vec::with_capacity(spec.blocks);
        for _ in 0..spec.blocks {
            let stream = |s: u64| root.fork((layer_index << 8) | s);
            let w2d = Kernel2D::he(spec.channels, c_in, k, &mut stream(KERNEL_STREAM))?;
            let op = inflate_with(
                config.fusion,
                &w2d,
                config.depth,
                &mut stream(MIXING_STREAM),
                &config.inflate,
            )?;
            layers.push(FusionLayer {
                op,
                bias: vec![0.0; spec.channels],
                activation: Activation::Relu,
            });
            c_in = spec.channels;
            layer_index += 1;
        }
        let unify = he_kernel5(
            [cfeat, spec.channels, 1, 1, 1],
            &mut root.fork(((i as u64) << 8) | UNIFY_STREAM),
        )?;
        stages.push(Stage {
            downsample: i > 0,
            layers,
            unify,
        });
    }
    let collapse = he_kernel5(
        [cfeat, cfeat, config.depth, 1, 1],
        &mut root.fork(COLLAPSE_STREAM),
    )?;
    Ok(Backbone {
        config: config.clone(),
        stages,
        collapse,
    })
}

fn avg_pool2(x: &Tensor4) -> Result<Tensor4> {
    let [c, d, h, w] = x.shape();
    Tensor4::from_fn([c, d, h / 2, w / 2], |[cc, dd, i, j]| {
        0.25 * (x.get([cc, dd, 2 * i, 2 * j])
            + x.get([cc, dd, 2 * i, 2 * j + 1])
            + x.get([cc, dd, 2 * i + 1, 2 * j])
            + x.get([cc, dd, 2 * i + 1, 2 * j + 1]))
    })
}

fn avg_pool2_adjoint(g: &Tensor4) -> Result<Tensor4> {
    let [c, d, h, w] = g.shape();
    Tensor4::from_fn([c, d, 2 * h, 2 * w], |[cc, dd, i, j]| {
        0.25 * g.get([cc, dd, i / 2, j / 2])
    })
}

fn upsample(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let [c, d, h, w] = x.shape();
    Tensor4::from_fn([c, d, h * factor, w * factor], |[cc, dd, i, j]| {
        x.get([cc, dd, i / factor, j / factor])
    })
}

fn upsample_adjoint(g: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 1 {
        return Ok(g.clone());
    }
    let [c, d, h, w] = g.shape();
    let mut out = Tensor4::zeros([c, d, h / factor, w / factor])?;
    for cc in 0..c {
        for dd in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let idx = [cc, dd, i / factor, j / factor];
                    out.set(idx, out.get(idx) + g.get([cc, dd, i, j]));
                }
            }
        }
    }
    Ok(out)
}

fn add_bias(x: &Tensor4, bias: &[f64]) -> Tensor4 {
    let mut y = x.clone();
    let block = x.len() / x.channels();
    for (c, chunk) in y.data_mut().chunks_mut(block).enumerate() {
        for v in chunk {
            *v += bias[c];
        }
    }
    y
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per stage, per layer: the layer input and its pre-activation.
    layer_inputs: Vec<Vec<Tensor4>>,
    pre_activations: Vec<Vec<Tensor4>>,
    stage_outputs: Vec<Tensor4>,
    fused: Tensor4,
}

impl ForwardTrace {
    /// Sign of every pre-activation, in layer order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre_activations
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

impl Backbone {
    pub fn feature_channels(&self) -> usize {
        self.collapse.shape()[0]
    }

    /// Every weight tensor as `(name, values)` in a fixed order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            for (j, layer) in st.layers.iter().enumerate() {
                for (name, p) in layer.op.params() {
                    out.push((format!("s{i}.l{j}.{name}"), p));
                }
                out.push((format!("s{i}.l{j}.bias"), layer.bias.as_slice()));
            }
            out.push((format!("s{i}.unify"), st.unify.data()));
        }
        out.push(("collapse".to_string(), self.collapse.data()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            for (j, layer) in st.layers.iter_mut().enumerate() {
                for (name, p) in layer.op.params_mut() {
                    out.push((format!("s{i}.l{j}.{name}"), p));
                }
                out.push((format!("s{i}.l{j}.bias"), layer.bias.as_mut_slice()));
            }
            out.push((format!("s{i}.unify"), st.unify.data_mut()));
        }
        out.push(("collapse".to_string(), self.collapse.data_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// In-place `self += alpha * other` for a gradient of the same layout.
    pub fn add_scaled(&mut self, alpha: f64, other: &Backbone) -> Result<()> {
        let theirs = other.params();
        let mut mine = self.params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Invalid("backbone layouts differ".into()));
        }
        for ((name, a), (_, b)) in mine.iter_mut().zip(theirs) {
            if a.len() != b.len() {
                return Err(shape_err(
                    "Backbone::add_scaled",
                    format!("{name} length mismatch"),
                ));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// Replaces the collapse kernel by one that copies the centre slice.
    pub fn select_key_slice(&mut self) {
        let [c, _, d, _, _] = self.collapse.shape();
        self.collapse = Kernel5::from_fn([c, c, d, 1, 1], |[o, i, t, _, _]| {
            if o == i && t == d / 2 {
                1.0
            } else {
                0.0
            }
        })
        .expect("nonzero dims");
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [c, d, h, w] = x.shape();
        let factor = self.config.downsample_factor();
        if c != 1 {
            return Err(shape_err(
                "forward_features",
                format!("expected 1 input channel, got {c}"),
            ));
        }
        if d != self.config.depth {
            return Err(shape_err(
                "forward_features",
                format!("expected depth {}, got {d}", self.config.depth),
            ));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Invalid(format!(
                "input {h}x{w} not divisible by downsampling factor {factor}"
            )));
        }
        Ok(())
    }

    pub fn forward_traced(&self, x: &Tensor4) -> Result<(Tensor3, ForwardTrace)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut layer_inputs = Vec::new();
        let mut pre_activations = Vec::new();
        let mut stage_outputs = Vec::new();
        for st in &self.stages {
            if st.downsample {
                h = avg_pool2(&h)?;
            }
            let mut inputs = Vec::new();
            let mut pres = Vec::new();
            for layer in &st.layers {
                let pre = add_bias(&forward(&layer.op, &h)?, &layer.bias);
                let Activation::Relu = layer.activation;
                inputs.push(h);
                h = pre.map(|v| v.max(0.0));
                pres.push(pre);
            }
            layer_inputs.push(inputs);
            pre_activations.push(pres);
            stage_outputs.push(h.clone());
        }
        let mut fused: Option<Tensor4> = None;
        for (i, (st, out)) in self.stages.iter().zip(&stage_outputs).enumerate() {
            let unified = upsample(
                &conv3d_forward(out, &st.unify, PadMode::SamePadZero)?,
                1 << i,
            )?;
            fused = Some(match fused {
                None => unified,
                Some(acc) => acc.add(&unified)?,
            });
        }
        let fused = fused.expect("at least one stage");
        let map = depth_collapse_forward(&fused, &self.collapse)?;
        Ok((
            map,
            ForwardTrace {
                layer_inputs,
                pre_activations,
                stage_outputs,
                fused,
            },
        ))
    }

    /// Gradients of `<grad_map, forward_features(x)>`: the input gradient and
    /// a backbone-shaped container holding every weight gradient.
    pub fn backward_traced(
        &self,
        trace: &ForwardTrace,
        grad_map: &Tensor3,
    ) -> Result<(Tensor4, Backbone)> {
        let [_, _, h, w] = trace.fused.shape();
        if grad_map.shape() != [self.feature_channels(), h, w] {
            return Err(shape_err(
                "backward_features",
                format!(
                    "grad_map {:?} vs output {:?}",
                    grad_map.shape(),
                    [self.feature_channels(), h, w]
                ),
            ));
        }
        let mut grads = self.clone();
        let (g_fused, g_collapse) =
            depth_collapse_backward(&trace.fused, &self.collapse, grad_map)?;
        grads.collapse = g_collapse;

        let mut g_stage_out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let g_unified = upsample_adjoint(&g_fused, 1 << i)?;
            let (g_out, g_unify) = conv3d_backward(&trace.stage_outputs[i], &st.unify, &g_unified)?;
            grads.stages[i].unify = g_unify;
            g_stage_out.push(g_out);
        }

        let mut carried: Option<Tensor4> = None;
        for i in (0..self.stages.len()).rev() {
            let st = &self.stages[i];
            let mut g = match carried.take() {
                None => g_stage_out[i].clone(),
                Some(c) => c.add(&g_stage_out[i])?,
            };
            for j in (0..st.layers.len()).rev() {
                let pre = &trace.pre_activations[i][j];
                let mut g_pre = g.clone();
                for (gv, pv) in g_pre.data_mut().iter_mut().zip(pre.data()) {
                    if *pv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                let block = g_pre.len() / g_pre.channels();
                let g_bias: Vec<f64> = g_pre
                    .data()
                    .chunks(block)
                    .map(|chunk| chunk.iter().sum())
                    .collect();
                let (g_in, g_op) = backward(&st.layers[j].op, &trace.layer_inputs[i][j], &g_pre)?;
                grads.stages[i].layers[j].op = g_op;
                grads.stages[i].layers[j].bias = g_bias;
                g = g_in;
            }
            if st.downsample {
                carried = Some(avg_pool2_adjoint(&g)?);
            } else {
                carried = Some(g);
            }
        }
        Ok((carried.expect("at least one stage"), grads))
    }
}

pub fn forward_features(b: &Backbone, x: &Tensor4) -> Result<Tensor3> {
    Ok(b.forward_traced(x)?.0)
}

pub fn backward_features(b: &Backbone, x: &Tensor4, grad_map: &Tensor3) -> Result<Backbone> {
    let (_, trace) = b.forward_traced(x)?;
    Ok(b.backward_traced(&trace, grad_map)?.1)
}

pub const BACKBONE_MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt`, one operator directory per layer (`s{i}_l{j}/`),
/// and CTF1 files for biases, unification kernels and the collapse.
pub fn save_backbone(dir: impl AsRef<Path>, b: &Backbone) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut kv = KvMap::new();
    kv.insert("type", "backbone");
    let cfg = b.config.to_kv();
    for key in cfg.keys() {
        kv.insert(key, cfg.get(key).unwrap_or_default());
    }
    fs::write(dir.join(BACKBONE_MANIFEST), kv.render())?;
    for (i, st) in b.stages.iter().enumerate() {
        for (j, layer) in st.layers.iter().enumerate() {
            save_operator(
                dir.join(format!("s{i}_l{j}")),
                &layer.op,
                Some(b.config.seed),
            )?;
            let bias = crate::tensor::Dense::from_vec([layer.bias.len()], layer.bias.clone())?;
            io::write(dir.join(format!("s{i}_l{j}_bias.ctf")), &bias)?;
        }
        io::write(dir.join(format!("s{i}_unify.ctf")), &st.unify)?;
    }
    io::write(dir.join("collapse.ctf"), &b.collapse)?;
    Ok(())
}

pub fn load_backbone(dir: impl AsRef<Path>) -> Result<Backbone> {
    let dir = dir.as_ref();
    let kv = KvMap::parse(&fs::read_to_string(dir.join(BACKBONE_MANIFEST))?)?;
    if kv.get("type") != Some("backbone") {
        return Err(Error::Manifest("expected type=backbone".into()));
    }
    let config = BackboneConfig::from_kv(&kv, &BackboneConfig::default())?;
    let mut b = build(&config)?;
    for (i, st) in b.stages.iter_mut().enumerate() {
        for (j, layer) in st.layers.iter_mut().enumerate() {
            let (op, _) = load_operator(dir.join(format!("s{i}_l{j}")))?;
            if op.kind() != layer.op.kind() || op.param_count() != layer.op.param_count() {
                return Err(Error::Manifest(format!(
                    "layer s{i}_l{j} does not match config"
                )));
            }
            layer.op = op;
            let bias = io::read::<1>(dir.join(format!("s{i}_l{j}_bias.ctf")))?;
            if bias.len() != layer.bias.len() {
                return Err(Error::Manifest(format!("bias s{i}_l{j} has wrong length")));
            }
            layer.bias = bias.into_vec();
        }
        let unify = io::read::<5>(dir.join(format!("s{i}_unify.ctf")))?;
        if unify.shape() != st.unify.shape() {
            return Err(Error::Manifest(format!("unify s{i} has wrong shape")));
        }
        st.unify = unify;
    }
    let collapse = io::read::<5>(dir.join("collapse.ctf"))?;
    if collapse.shape() != b.collapse.shape() {
        return Err(Error::Manifest("collapse has wrong shape".into()));
    }
    b.collapse = collapse;
    Ok(b)
}

#[cfg(test)]
mod tests;
