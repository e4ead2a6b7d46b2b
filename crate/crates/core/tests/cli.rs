use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use axial_fusion::backbone::{build, forward_features, save_backbone, BackboneConfig, StageSpec};
use axial_fusion::operators::{forward, inflate, Kernel2D, OperatorKind};
use axial_fusion::tensor::io;
use axial_fusion::{SeededRng, Tensor3, Tensor4};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_axial-fusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cost_table_shows_a3d_overhead_per_layer() {
    let o = run(&["cost", "--fusion", "a3d", "--d", "7"]);
    assert!(o.status.success());
    let text = stdout(&o);
    // default stages carry 64, 128 and 256 output channels, K = 3
    for co in [64, 128, 256] {
        assert!(text.contains(&format!("1+7/{}", co * 9)), "{text}");
    }
    assert!(!text.contains("== nofusion =="));
}

#[test]
fn cost_csv_has_one_line_per_kind_and_layer() {
    let o = run(&["cost", "--csv", "--stages", "16x1,32x2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(
        lines[0],
        "kind,layer,params,macs,overhead_params,overhead_macs"
    );
    assert_eq!(lines.len(), 1 + 6 * 3);
    assert!(lines[1].starts_with("nofusion,0,"));
    // I3D layers cost exactly K times the planar ones
    assert!(lines
        .iter()
        .filter(|l| l.starts_with("i3d,"))
        .all(|l| l.ends_with(",3,3")));
}

#[test]
fn cost_flops_double_macs() {
    let macs = stdout(&run(&["cost", "--csv", "--fusion", "p3d"]));
    let flops = stdout(&run(&["cost", "--csv", "--fusion", "p3d", "--flops"]));
    for (a, b) in macs.lines().skip(1).zip(flops.lines().skip(1)) {
        let m: u128 = a.split(',').nth(3).unwrap().parse().unwrap();
        let f: u128 = b.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(f, 2 * m);
    }
}

#[test]
fn check_passes_on_this_build() {
    let o = run(&["check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).trim_end().ends_with("0 failed"));
}

#[test]
fn unknown_flags_print_usage_and_fail() {
    for args in [
        &["cost", "--bogus"][..],
        &["frobnicate"],
        &["check", "--fusion", "a3d"],
    ] {
        let o = run(args);
        assert!(!o.status.success(), "{args:?}");
        assert!(
            String::from_utf8_lossy(&o.stderr).contains("Usage"),
            "{args:?}"
        );
    }
    assert!(!run(&[]).status.success());
    let o = run(&["demo", "--fusion", "c3d"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("c3d"));
}

#[test]
fn demo_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("demo.cfg");
    fs::write(
        &cfg,
        "# short run\nvolumes=12\nval_volumes=6\nepochs=3\nbatch_size=4\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("m{i}.csv"));
        let o = run(&[
            "demo",
            "--fusion",
            "acs",
            "--seed",
            "4",
            "--config",
            path(&cfg),
            "--out",
            path(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_auc\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn demo_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "momentum=0.9\n").unwrap();
    let o = run(&["demo", "--config", path(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));
}

fn final_val_loss(csv: &str) -> f64 {
    csv.lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn demo_context_fusion_beats_per_slice_baseline() {
    let plain = run(&["demo", "--fusion", "nofusion", "--seed", "0"]);
    let a3d = run(&["demo", "--fusion", "a3d", "--seed", "0"]);
    assert!(plain.status.success() && a3d.status.success());
    let (p, a) = (
        final_val_loss(&stdout(&plain)),
        final_val_loss(&stdout(&a3d)),
    );
    assert!(a < p, "a3d {a} vs nofusion {p}");
}

#[test]
fn inflate_then_forward_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(5);
    let w2d = Kernel2D::he(3, 2, 3, &mut rng).unwrap();
    let kpath = dir.path().join("k.ctf");
    io::write(&kpath, w2d.as_dense()).unwrap();
    let x = Tensor4::from_fn([2, 4, 5, 5], |_| rng.uniform(-1.0, 1.0)).unwrap();
    let xpath = dir.path().join("x.ctf");
    io::write(&xpath, &x).unwrap();
    for kind in OperatorKind::ALL {
        let op = dir.path().join(kind.name());
        let o = run(&[
            "inflate",
            "--fusion",
            kind.name(),
            "--kernel",
            path(&kpath),
            "--depth",
            "4",
            "--out",
            path(&op),
            "--seed",
            "9",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ypath = dir.path().join(format!("{}.ctf", kind.name()));
        let o = run(&[
            "forward",
            "--model",
            path(&op),
            "--input",
            path(&xpath),
            "--out",
            path(&ypath),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let state = inflate(kind, &w2d, 4, &mut SeededRng::new(9)).unwrap();
        let want = forward(&state, &x).unwrap();
        let got: Tensor4 = io::read(&ypath).unwrap();
        assert_eq!(got, want, "{kind}");
    }
}

#[test]
fn forward_runs_a_saved_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig {
        depth: 3,
        stages: vec![StageSpec {
            channels: 4,
            blocks: 1,
        }],
        height: 6,
        width: 6,
        fusion: OperatorKind::Tsm,
        ..BackboneConfig::default()
    };
    let b = build(&cfg).unwrap();
    let model = dir.path().join("bb");
    save_backbone(&model, &b).unwrap();
    let mut rng = SeededRng::new(1);
    let x = Tensor4::from_fn([1, 3, 6, 6], |_| rng.uniform(-1.0, 1.0)).unwrap();
    let xpath = dir.path().join("v.ctf");
    io::write(&xpath, &x.clone().reshape([3, 6, 6]).unwrap()).unwrap();
    let ypath = dir.path().join("f.ctf");
    let o = run(&[
        "forward",
        "--model",
        path(&model),
        "--input",
        path(&xpath),
        "--out",
        path(&ypath),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got: Tensor3 = io::read(&ypath).unwrap();
    assert_eq!(got, forward_features(&b, &x).unwrap());
}

#[test]
fn forward_reports_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "forward",
        "--model",
        path(&dir.path().join("none")),
        "--input",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
