//! Synthetic slice-context task and a plain SGD training loop.
//!
//! Every volume holds two Gaussian blobs of equal radius. On the key slice
//! both blobs carry the same negative profile, so no single-slice model can
//! tell them apart. Only the neighbouring slices differ: the positive blob
//! flips sign around the key slice, the distractor keeps it.

use std::fmt::Write as _;

use crate::backbone::{build, BackboneConfig, StageSpec};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::operators::OperatorKind;
use crate::rng::SeededRng;
use crate::tensor::{Dense, Tensor3, Tensor4};

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    pub volumes: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            volumes: 96,
            depth: 3,
            height: 16,
            width: 16,
            radius: 3,
            amplitude: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volumes == 0 {
            return Err(Error::Invalid("volumes must be positive".into()));
        }
        if self.depth < 3 {
            return Err(Error::Invalid(format!(
                "depth must be at least 3, got {}",
                self.depth
            )));
        }
        if self.radius == 0 {
            return Err(Error::Invalid("blob radius must be positive".into()));
        }
        if self.height < 2 * self.radius + 1 || self.width < 2 * self.radius + 1 {
            return Err(Error::Invalid(format!(
                "radius {} blob does not fit in {}x{}",
                self.radius, self.height, self.width
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Invalid("amplitude must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn key_slice(&self) -> usize {
        self.depth / 2
    }

    fn profile(&self, dy: i64, dx: i64) -> Option<f64> {
        let r2 = (dy * dy + dx * dx) as f64;
        let radius = self.radius as f64;
        if r2 > radius * radius {
            return None;
        }
        let sigma = radius / 2.0;
        Some(self.amplitude * (-r2 / (2.0 * sigma * sigma)).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shape (1, D, H, W).
    pub volume: Tensor4,
    /// Key-slice pixels inside the positive blob.
    pub mask: Vec<bool>,
    /// Key-slice pixels inside the distractor blob.
    pub distractor: Vec<bool>,
    pub centres: [(usize, usize); 2],
}

impl Sample {
    pub fn key_plane(&self) -> &[f64] {
        let d = self.volume.depth();
        self.volume.plane(0, d / 2)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as u8 as f64).collect()
    }
}

/// Sign of each blob on slices key-1, key, key+1.
pub const POSITIVE_PATTERN: [f64; 3] = [1.0, -1.0, 1.0];
pub const DISTRACTOR_PATTERN: [f64; 3] = [-1.0, -1.0, -1.0];

pub fn generate_task(cfg: &SyntheticTaskConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    (0..cfg.volumes)
        .map(|i| generate_volume(cfg, &mut root.fork(i as u64)))
        .collect()
}

fn place(cfg: &SyntheticTaskConfig, rng: &mut SeededRng) -> (usize, usize) {
    let r = cfg.radius;
    (
        r + rng.below(cfg.height - 2 * r),
        r + rng.below(cfg.width - 2 * r),
    )
}

fn generate_volume(cfg: &SyntheticTaskConfig, rng: &mut SeededRng) -> Result<Sample> {
    let min_sep = (2 * cfg.radius) as i64;
    let mut centres = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let (a, b) = (place(cfg, rng), place(cfg, rng));
        let dy = a.0 as i64 - b.0 as i64;
        let dx = a.1 as i64 - b.1 as i64;
        if dy * dy + dx * dx > min_sep * min_sep {
            centres = Some([a, b]);
            break;
        }
    }
    let centres = centres.ok_or_else(|| {
        Error::Invalid(format!(
            "could not place two radius {} blobs in {}x{} after {MAX_PLACEMENT_ATTEMPTS} attempts",
            cfg.radius, cfg.height, cfg.width
        ))
    })?;
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let key = cfg.key_slice();
    let mut volume = Tensor4::from_fn([1, d, h, w], |_| cfg.noise * rng.normal())?;
    let mut mask = vec![false; h * w];
    let mut distractor = vec![false; h * w];
    for (centre, pattern, m) in [
        (centres[0], POSITIVE_PATTERN, &mut mask),
        (centres[1], DISTRACTOR_PATTERN, &mut distractor),
    ] {
        for y in 0..h {
            for x in 0..w {
                let Some(v) = cfg.profile(y as i64 - centre.0 as i64, x as i64 - centre.1 as i64)
                else {
                    continue;
                };
                m[y * w + x] = true;
                for (t, sign) in pattern.iter().enumerate() {
                    let i = volume.offset([0, key + t - 1, y, x]);
                    volume.data_mut()[i] += sign * v;
                }
            }
        }
    }
    Ok(Sample {
        volume,
        mask,
        distractor,
        centres,
    })
}

/// Mann-Whitney estimate of the ROC area; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "auc score".into(),
            index: i,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Invalid("auc needs both classes".into()));
    }
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// AUC restricted to pixels inside either blob, positive blob as class 1.
pub fn blob_auc(samples: &[Sample], scores: &[Vec<f64>]) -> Result<f64> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (sample, score) in samples.iter().zip(scores) {
        for (p, &v) in score.iter().enumerate() {
            if sample.mask[p] || sample.distractor[p] {
                s.push(v);
                l.push(sample.mask[p]);
            }
        }
    }
    auc(&s, &l)
}

fn matched_filter(cfg: &SyntheticTaskConfig, plane: &[f64]) -> Vec<f64> {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let r = cfg.radius as i64;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || yy >= h || xx < 0 || xx >= w {
                        continue;
                    }
                    if let Some(t) = cfg.profile(dy, dx) {
                        acc += t * plane[(yy * w + xx) as usize];
                    }
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Template match on the key slice alone.
pub fn key_slice_oracle(cfg: &SyntheticTaskConfig, sample: &Sample) -> Vec<f64> {
    matched_filter(cfg, sample.key_plane())
        .iter()
        .map(|v| -v)
        .collect()
}

/// Template match on the two neighbours; positive blobs are bright there.
pub fn context_oracle(cfg: &SyntheticTaskConfig, sample: &Sample) -> Vec<f64> {
    let key = cfg.key_slice();
    let above = sample.volume.plane(0, key - 1);
    let below = sample.volume.plane(0, key + 1);
    let sum: Vec<f64> = above.iter().zip(below).map(|(a, b)| a + b).collect();
    matched_filter(cfg, &sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub fusion: OperatorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let task = SyntheticTaskConfig::default();
        Self {
            fusion: OperatorKind::A3d,
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 0,
            backbone: BackboneConfig {
                depth: task.depth,
                stages: vec![
                    StageSpec {
                        channels: 8,
                        blocks: 1,
                    },
                    StageSpec {
                        channels: 16,
                        blocks: 1,
                    },
                ],
                height: task.height,
                width: task.width,
                ..BackboneConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be nonnegative".into()));
        }
        self.backbone.validate()
    }
}

/// Task, validation size and training settings for one demo run.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub task: SyntheticTaskConfig,
    pub val_volumes: usize,
    pub train: TrainConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskConfig::default(),
            val_volumes: 48,
            train: TrainConfig::default(),
        }
    }
}

impl DemoConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.train.seed = seed;
        self.train.backbone.seed = seed;
        self
    }

    pub fn with_fusion(mut self, fusion: OperatorKind) -> Self {
        self.train.fusion = fusion;
        self.train.backbone.fusion = fusion;
        self
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let t = &self.task;
        kv.insert("volumes", t.volumes);
        kv.insert("val_volumes", self.val_volumes);
        kv.insert("depth", t.depth);
        kv.insert("height", t.height);
        kv.insert("width", t.width);
        kv.insert("radius", t.radius);
        kv.insert("amplitude", t.amplitude);
        kv.insert("noise", t.noise);
        kv.insert("seed", self.train.seed);
        kv.insert("fusion", self.train.fusion);
        kv.insert("epochs", self.train.epochs);
        kv.insert("batch_size", self.train.batch_size);
        kv.insert("learning_rate", self.train.learning_rate);
        let b = &self.train.backbone;
        kv.insert("stages", b.stages_text());
        kv.insert("k", b.kernel_size);
        kv.insert("shift_divisor", b.inflate.shift_divisor);
        kv.insert("perturbation", b.inflate.perturbation);
        kv
    }

    /// Reads `key=value` settings; unknown keys are rejected, missing keys keep `base`.
    pub fn from_kv(kv: &KvMap, base: &DemoConfig) -> Result<Self> {
        const KNOWN: [&str; 17] = [
            "volumes",
            "val_volumes",
            "depth",
            "height",
            "width",
            "radius",
            "amplitude",
            "noise",
            "seed",
            "fusion",
            "epochs",
            "batch_size",
            "learning_rate",
            "stages",
            "k",
            "shift_divisor",
            "perturbation",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Invalid(format!("unknown demo setting `{k}`")));
        }
        let t = &base.task;
        let task = SyntheticTaskConfig {
            volumes: kv.parse_or("volumes", t.volumes)?,
            depth: kv.parse_or("depth", t.depth)?,
            height: kv.parse_or("height", t.height)?,
            width: kv.parse_or("width", t.width)?,
            radius: kv.parse_or("radius", t.radius)?,
            amplitude: kv.parse_or("amplitude", t.amplitude)?,
            noise: kv.parse_or("noise", t.noise)?,
            seed: t.seed,
        };
        let mut backbone = BackboneConfig::from_kv(kv, &base.train.backbone)?;
        backbone.depth = task.depth;
        backbone.height = task.height;
        backbone.width = task.width;
        let train = TrainConfig {
            fusion: backbone.fusion,
            epochs: kv.parse_or("epochs", base.train.epochs)?,
            batch_size: kv.parse_or("batch_size", base.train.batch_size)?,
            learning_rate: kv.parse_or("learning_rate", base.train.learning_rate)?,
            seed: base.train.seed,
            backbone,
        };
        let cfg = DemoConfig {
            task,
            val_volumes: kv.parse_or("val_volumes", base.val_volumes)?,
            train,
        };
        Ok(match kv.get("seed") {
            Some(s) => cfg.with_seed(
                s.parse()
                    .map_err(|_| Error::Invalid(format!("bad seed `{s}`")))?,
            ),
            None => cfg,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.val_volumes == 0 {
            return Err(Error::Invalid("val_volumes must be positive".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TaskSplit {
    pub fn generate(cfg: &DemoConfig) -> Result<Self> {
        let train = generate_task(&cfg.task)?;
        let val = generate_task(&SyntheticTaskConfig {
            volumes: cfg.val_volumes,
            seed: SeededRng::new(cfg.task.seed).fork(u64::MAX).next_u64(),
            ..cfg.task.clone()
        })?;
        Ok(Self { train, val })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl DemoMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
        for m in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                m.epoch, m.train_loss, m.val_loss, m.val_auc
            );
        }
        out
    }
}

/// Backbone plus a 1x1 logistic head on the key-slice feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceClassifier {
    pub backbone: crate::backbone::Backbone,
    pub head: Vec<f64>,
    pub head_bias: f64,
}

impl SliceClassifier {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut bcfg = cfg.backbone.clone();
        bcfg.fusion = cfg.fusion;
        let mut backbone = build(&bcfg)?;
        backbone.select_key_slice();
        let c = backbone.feature_channels();
        let mut rng = SeededRng::new(cfg.seed).fork(0x4ead);
        let scale = (1.0 / c as f64).sqrt();
        let head = (0..c).map(|_| scale * rng.normal()).collect();
        Ok(Self {
            backbone,
            head,
            head_bias: 0.0,
        })
    }

    fn logits_from(&self, map: &Tensor3) -> Vec<f64> {
        let [c, h, w] = map.shape();
        let mut out = vec![self.head_bias; h * w];
        for ch in 0..c {
            let wc = self.head[ch];
            for (o, v) in out
                .iter_mut()
                .zip(&map.data()[ch * h * w..(ch + 1) * h * w])
            {
                *o += wc * v;
            }
        }
        out
    }

    pub fn logits(&self, volume: &Tensor4) -> Result<Vec<f64>> {
        Ok(self.logits_from(&crate::backbone::forward_features(&self.backbone, volume)?))
    }

    /// Mean logistic loss over key-slice pixels and, if asked, its gradient.
    fn loss_and_grad(&self, sample: &Sample, want_grad: bool) -> Result<(f64, Option<Gradient>)> {
        let (map, trace) = self.backbone.forward_traced(&sample.volume)?;
        let logits = self.logits_from(&map);
        let n = logits.len() as f64;
        let mut loss = 0.0;
        let mut dlogit = vec![0.0; logits.len()];
        for (i, (&z, &m)) in logits.iter().zip(&sample.mask).enumerate() {
            let y = m as u8 as f64;
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            dlogit[i] = (sigmoid(z) - y) / n;
        }
        loss /= n;
        if !want_grad {
            return Ok((loss, None));
        }
        let [c, h, w] = map.shape();
        let mut head = vec![0.0; c];
        let gmap = Dense::from_fn([c, h, w], |[ch, y, x]| dlogit[y * w + x] * self.head[ch])?;
        for (ch, g) in head.iter_mut().enumerate() {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            *g = plane.iter().zip(&dlogit).map(|(a, b)| a * b).sum();
        }
        let (_, mut backbone) = self.backbone.backward_traced(&trace, &gmap)?;
        backbone.collapse = Dense::zeros(backbone.collapse.shape())?;
        Ok((
            loss,
            Some(Gradient {
                backbone,
                head,
                head_bias: dlogit.iter().sum(),
            }),
        ))
    }

    fn apply(&mut self, g: &Gradient, step: f64) -> Result<()> {
        self.backbone.add_scaled(-step, &g.backbone)?;
        for (w, d) in self.head.iter_mut().zip(&g.head) {
            *w -= step * d;
        }
        self.head_bias -= step * g.head_bias;
        Ok(())
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut scores = Vec::with_capacity(samples.len());
        for s in samples {
            loss += self.loss_and_grad(s, false)?.0;
            scores.push(self.logits(&s.volume)?);
        }
        Ok((loss / samples.len() as f64, blob_auc(samples, &scores)?))
    }
}

struct Gradient {
    backbone: crate::backbone::Backbone,
    head: Vec<f64>,
    head_bias: f64,
}

impl Gradient {
    fn accumulate(&mut self, other: &Gradient) -> Result<()> {
        self.backbone.add_scaled(1.0, &other.backbone)?;
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            *a += b;
        }
        self.head_bias += other.head_bias;
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_finite(epoch: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Plain minibatch SGD; returns the model and one metrics row per epoch.
pub fn train_model(data: &TaskSplit, cfg: &TrainConfig) -> Result<(SliceClassifier, DemoMetrics)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut model = SliceClassifier::new(cfg)?;
    let mut rng = SeededRng::new(cfg.seed).fork(0x5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = DemoMetrics::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut losses = vec![0.0; data.train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let grads = batch_gradients(&model, &data.train, batch)?;
            let mut sum: Option<Gradient> = None;
            for (&i, (loss, g)) in batch.iter().zip(grads) {
                losses[i] = check_finite(epoch, loss)?;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => acc.accumulate(&g)?,
                }
            }
            if let Some(g) = sum {
                model.apply(&g, cfg.learning_rate / batch.len() as f64)?;
            }
        }
        let train_loss = check_finite(epoch, losses.iter().sum::<f64>() / losses.len() as f64)?;
        let (val_loss, val_auc) = model.evaluate(&data.val)?;
        check_finite(epoch, val_loss)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });
    }
    Ok((model, metrics))
}

pub fn train(data: &TaskSplit, cfg: &TrainConfig) -> Result<DemoMetrics> {
    Ok(train_model(data, cfg)?.1)
}

/// Generates the task and trains on it.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoMetrics> {
    cfg.validate()?;
    train(&TaskSplit::generate(cfg)?, &cfg.train)
}

/// Per-sample gradients, computed in parallel and returned in batch order.
fn batch_gradients(
    model: &SliceClassifier,
    samples: &[Sample],
    batch: &[usize],
) -> Result<Vec<(f64, Gradient)>> {
    let results: Vec<Result<(f64, Option<Gradient>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .iter()
            .map(|&i| scope.spawn(move || model.loss_and_grad(&samples[i], true)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    results
        .into_iter()
        .map(|r| r.map(|(l, g)| (l, g.expect("gradient requested"))))
        .collect()
}
