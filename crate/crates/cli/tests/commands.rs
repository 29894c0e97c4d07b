use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qmvos::evalsynth::MetricReport;

fn qmvos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmvos"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qmvos(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = qmvos(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--set", "c_k=4", "--set", "c_v=8", "--set", "c_d=8", "--set", "c8=8", "--set", "c16=8", "--set", "ffn_hidden=16",
];

/// synth a 6-frame 32×32 video, train two steps on it; returns (video, weights).
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let video = dir.join("video");
    ok(&["synth", "--seed", "3", "--objects", "2", "--frames", "6", "--size", "32", "--scenario", "distinct", "--out", s(&video)]);
    let weights = dir.join("w.qmvw");
    let mut args = vec!["train", "--data", s(&video), "--steps", "2", "--seq-len", "3", "--out-weights", s(&weights)];
    args.extend(SMALL);
    ok(&args);
    (video, weights)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--seed", "9", "--frames", "3", "--size", "32x48", "--out", s(out)]);
    }
    for name in ["frames.txt", "masks.txt", "frame_0002.ppm", "mask_0000.pgm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(fs::read(a.join("frame_0000.ppm")).unwrap().starts_with(b"P6\n48 32\n255\n"));
}

#[test]
fn train_segment_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let (video, weights) = fixture(dir.path());
    assert!(weights.exists());
    let cfg = fs::read_to_string(dir.path().join("w.qmvw.cfg")).unwrap();
    assert!(cfg.contains("c_v = 8") && cfg.contains("steps = 2"));
    let curve = fs::read_to_string(dir.path().join("w.qmvw.loss.txt")).unwrap();
    assert_eq!(curve.lines().count(), 2);

    let first = video.join("mask_0000.pgm");
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    for out in [&p1, &p2] {
        ok(&["segment", "--video", s(&video), "--first-mask", s(&first), "--weights", s(&weights), "--out", s(out)]);
    }
    for i in 0..6 {
        let name = format!("label_{i:04}.pgm");
        assert_eq!(fs::read(p1.join(&name)).unwrap(), fs::read(p2.join(&name)).unwrap());
    }
    assert_eq!(fs::read(p1.join("label_0000.pgm")).unwrap(), fs::read(&first).unwrap());

    let report = dir.path().join("self.json");
    ok(&["eval", "--pred", s(&video), "--gt", s(&video), "--report", s(&report)]);
    let r = MetricReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.j_and_f, 1.0);

    let report = dir.path().join("pred.json");
    ok(&["eval", "--pred", s(&p1), "--gt", s(&video), "--report", s(&report)]);
    let r = MetricReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r.j_and_f));
    assert_eq!(r.frames_evaluated, 5);
}

#[test]
fn bench_reports_share() {
    let dir = tempfile::tempdir().unwrap();
    let (video, weights) = fixture(dir.path());
    let full = dir.path().join("full.json");
    let base = dir.path().join("base.json");
    let common = ["bench", "--video", s(&video), "--weights", s(&weights), "--warmup", "0", "--reps", "1"];
    let mut a = common.to_vec();
    a.extend(["--report", s(&full)]);
    ok(&a);
    let mut b = common.to_vec();
    b.extend(["--baseline", "--report", s(&base)]);
    ok(&b);
    let full = fs::read_to_string(full).unwrap();
    let base = fs::read_to_string(base).unwrap();
    assert!(full.contains("\"baseline\": false"));
    assert!(base.contains("\"baseline\": true") && base.contains("\"query_share\": 0.0"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "2"]);
    assert_eq!(out.lines().count(), 10);
    assert!(out.lines().all(|l| l.ends_with("ok")), "{out}");
}

#[test]
fn errors_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let (video, weights) = fixture(dir.path());
    let first = video.join("mask_0000.pgm");
    let seg = |extra: &[&str]| {
        let out = dir.path().join("out");
        let mut a = vec!["segment", "--video", s(&video), "--first-mask", s(&first), "--weights", s(&weights), "--out", s(&out)];
        a.extend(extra);
        fails(&a)
    };
    assert!(seg(&["--set", "c_vv=3"]).contains("c_vv"));
    assert!(seg(&["--set", "mem_interval=0"]).contains("mem_interval"));
    // weights trained with c_v = 8 do not fit the default widths
    let bad_cfg = dir.path().join("default.cfg");
    fs::write(&bad_cfg, "").unwrap();
    let err = seg(&["--config", s(&bad_cfg)]);
    assert!(err.contains("weights"), "{err}");

    let broken = dir.path().join("broken.pgm");
    fs::write(&broken, b"P5\n32 x\n255\n").unwrap();
    let out = dir.path().join("out");
    let err = fails(&["segment", "--video", s(&video), "--first-mask", s(&broken), "--weights", s(&weights), "--out", s(&out)]);
    assert!(err.contains("height"), "{err}");

    let missing = dir.path().join("nowhere");
    let err = fails(&["eval", "--pred", s(&missing), "--gt", s(&video), "--report", s(&out)]);
    assert!(err.contains("nowhere"), "{err}");

    let err = fails(&["synth", "--size", "30", "--out", s(&out)]);
    assert!(err.contains("16"), "{err}");
    let err = fails(&["synth", "--scenario", "crowded", "--out", s(&out)]);
    assert!(err.contains("scenario"), "{err}");
}
