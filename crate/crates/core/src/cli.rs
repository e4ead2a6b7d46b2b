//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{
    forward_features, load_backbone, save_backbone, BackboneConfig, BACKBONE_MANIFEST,
};
use crate::cost::{backbone_cost, render_csv, render_table, Unit};
use crate::demo::{train_model, DemoConfig, TaskSplit};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::operators::{
    forward, inflate_with, load_operator, save_operator, InflateOptions, Kernel2D, OperatorKind,
};
use crate::probes::suite;
use crate::rng::SeededRng;
use crate::tensor::{io, Dense, Tensor4};

#[derive(Debug, Parser)]
#[command(
    name = "axial-fusion",
    version,
    about = "Axial context fusion operators for slice stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and MAC counts of the backbone fusion layers.
    Cost(CostArgs),
    /// Run the self-check battery; nonzero exit on any failure.
    Check(CheckArgs),
    /// Train on the synthetic slice-context task and write a metrics CSV.
    Demo(DemoArgs),
    /// Turn a 2D kernel (CTF1, rank 4) into an operator directory.
    Inflate(InflateArgs),
    /// Apply a saved operator or backbone to a CTF1 volume.
    Forward(ForwardArgs),
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Operator kind, or `all`.
    #[arg(long, default_value = "all")]
    fusion: String,
    /// Number of slices.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    /// Stage list such as `64x1,128x1`.
    #[arg(long)]
    stages: Option<String>,
    /// Report FLOPs (2 per MAC) instead of MACs.
    #[arg(long)]
    flops: bool,
    /// Emit CSV instead of the table.
    #[arg(long)]
    csv: bool,
    /// key=value file with backbone settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long)]
    fusion: Option<OperatorKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Metrics CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained backbone here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// key=value file with task and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InflateArgs {
    #[arg(long)]
    fusion: OperatorKind,
    /// CTF1 file of shape (Cout, Cin, K, K).
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    shift_divisor: Option<usize>,
    #[arg(long)]
    perturbation: Option<f64>,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    /// Operator or backbone directory.
    #[arg(long)]
    model: PathBuf,
    /// CTF1 volume: (C, D, H, W) for an operator, (D, H, W) or (1, D, H, W) for a backbone.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Cost(a) => cost(a, out),
        Command::Check(a) => check(a, out),
        Command::Demo(a) => demo(a, out),
        Command::Inflate(a) => inflate_cmd(a, out),
        Command::Forward(a) => forward_cmd(a, out),
    }
}

fn read_kv(path: &Path) -> Result<KvMap> {
    KvMap::parse(&fs::read_to_string(path)?)
}

fn cost(a: CostArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = BackboneConfig::default();
    if let Some(p) = &a.config {
        cfg = BackboneConfig::from_kv(&read_kv(p)?, &cfg)?;
    }
    if let Some(d) = a.d {
        cfg.depth = d;
    }
    if let Some(h) = a.h {
        cfg.height = h;
    }
    if let Some(w) = a.w {
        cfg.width = w;
    }
    if let Some(s) = &a.stages {
        cfg.stages = BackboneConfig::parse_stages(s)?;
    }
    cfg.validate()?;
    let kinds: Vec<OperatorKind> = if a.fusion.eq_ignore_ascii_case("all") {
        OperatorKind::ALL.to_vec()
    } else {
        vec![a.fusion.parse()?]
    };
    let layers = cfg.fusion_layers();
    let reports = kinds
        .iter()
        .map(|&k| backbone_cost(k, &layers))
        .collect::<Result<Vec<_>>>()?;
    let unit = if a.flops { Unit::Flops } else { Unit::Macs };
    let text = if a.csv {
        render_csv(&reports, unit)
    } else {
        render_table(&reports, unit)
    };
    out.write_all(text.as_bytes())?;
    Ok(0)
}

fn check(a: CheckArgs, out: &mut dyn Write) -> Result<i32> {
    let results = suite::run_all(a.seed)?;
    out.write_all(suite::render(&results).as_bytes())?;
    Ok(if results.iter().all(|r| r.passed) {
        0
    } else {
        1
    })
}

fn demo(a: DemoArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = DemoConfig::default();
    if let Some(p) = &a.config {
        cfg = DemoConfig::from_kv(&read_kv(p)?, &cfg)?;
    }
    if let Some(f) = a.fusion {
        cfg = cfg.with_fusion(f);
    }
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    let data = TaskSplit::generate(&cfg)?;
    let (model, metrics) = train_model(&data, &cfg.train)?;
    let csv = metrics.to_csv();
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    if let Some(dir) = &a.checkpoint {
        save_backbone(dir, &model.backbone)?;
    }
    if let Some(last) = metrics.last() {
        eprintln!(
            "{}: final val_loss {:.6} val_auc {:.6}",
            cfg.train.fusion, last.val_loss, last.val_auc
        );
    }
    Ok(0)
}

fn inflate_cmd(a: InflateArgs, out: &mut dyn Write) -> Result<i32> {
    let w2d = Kernel2D::new(io::read::<4>(&a.kernel)?)?;
    let mut opts = InflateOptions::default();
    if let Some(s) = a.shift_divisor {
        opts.shift_divisor = s;
    }
    if let Some(p) = a.perturbation {
        opts.perturbation = p;
    }
    let state = inflate_with(a.fusion, &w2d, a.depth, &mut SeededRng::new(a.seed), &opts)?;
    save_operator(&a.out, &state, Some(a.seed))?;
    writeln!(
        out,
        "wrote {} operator ({} parameters) to {}",
        a.fusion,
        state.param_count(),
        a.out.display()
    )?;
    Ok(0)
}

fn forward_cmd(a: ForwardArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = read_kv(&a.model.join(BACKBONE_MANIFEST))?;
    let raw = io::read_raw(&a.input)?;
    match manifest.get("type") {
        Some("backbone") => {
            let b = load_backbone(&a.model)?;
            let x: Tensor4 = match raw.shape.len() {
                3 => {
                    let [d, h, w]: [usize; 3] = raw.shape.clone().try_into().expect("rank 3");
                    Dense::from_vec([1, d, h, w], raw.data)?
                }
                _ => raw.into_dense()?,
            };
            let y = forward_features(&b, &x)?;
            io::write(&a.out, &y)?;
            writeln!(
                out,
                "wrote feature map {:?} to {}",
                y.shape(),
                a.out.display()
            )?;
        }
        Some("operator") => {
            let (state, _) = load_operator(&a.model)?;
            let y = forward(&state, &raw.into_dense()?)?;
            io::write(&a.out, &y)?;
            writeln!(out, "wrote {:?} to {}", y.shape(), a.out.display())?;
        }
        other => {
            return Err(Error::Manifest(format!("unknown model type {other:?}")));
        }
    }
    Ok(0)
}
