use std::path::Path;
use std::process::{Command, Output};

use mtlseg::data::io::{read_pgm, write_ppm};
use mtlseg::data::{Dataset, SceneKind};

fn mtlseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_attn_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = mtlseg(&[
        "gen-data",
        "--kind",
        "crop",
        "--count",
        "3",
        "--size",
        "64",
        "--seed",
        "7",
        "--out",
        s(&data),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(data.join("manifest.txt").exists());
    assert!(data.join("s0002.ppm").exists());

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny run\niterations = 3\nbatch_size = 1\nlog_interval = 1\ncheckpoint_interval = 2\ndata = {}\nout = {}\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    let o = mtlseg(&["train", "--config", s(&cfg), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("iter=0 lr=6e-5"), "{out}");
    assert!(out.contains("final.train.line.seg.f1="), "{out}");
    assert!(run.join("last.ckpt").exists());
    assert!(run.join("iter_000002.ckpt").exists());
    let log = std::fs::read_to_string(run.join("run.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 3);

    let ckpt = run.join("last.ckpt");
    let report = dir.path().join("report.txt");
    let o = mtlseg(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("samples=3\n"), "{text}");
    assert!(text.contains("gap.det.f1="));
    assert_eq!(stdout(&o).trim_end(), text.trim_end());

    let attn = dir.path().join("attn.pgm");
    let img = data.join("s0001.ppm");
    let o = mtlseg(&[
        "attn-dump",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&img),
        "--task",
        "2",
        "--pixel",
        "8,8",
        "--out",
        s(&attn),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let m = read_pgm(&attn).unwrap();
    assert_eq!((m.height, m.width), (64, 64));

    let o = mtlseg(&[
        "attn-dump",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&img),
        "--task",
        "3",
        "--pixel",
        "8,8",
        "--out",
        s(&attn),
    ]);
    assert_eq!(code(&o), 1);

    let big = dir.path().join("big.ppm");
    let scene = Dataset::generate(SceneKind::Crop, 1, 96, 3).unwrap();
    write_ppm(&big, &scene.samples[0].image).unwrap();
    let pred = dir.path().join("pred.pgm");
    let skel = dir.path().join("skel");
    let o = mtlseg(&[
        "infer-tile",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&big),
        "--patch",
        "64",
        "--out",
        s(&pred),
        "--skeletons",
        s(&skel),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let m = read_pgm(&pred).unwrap();
    assert_eq!((m.height, m.width), (96, 96));
    assert!(m.data.iter().all(|v| [0, 128, 255].contains(v)));
    assert!(skel.join("skeleton_2.pgm").exists());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mtlseg(&["gen-data", "--bogus"])), 1);
    assert_eq!(code(&mtlseg(&["no-such-command"])), 1);
    assert_eq!(code(&mtlseg(&[])), 1);
    assert_eq!(code(&mtlseg(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "iterations = 3\nlearning_rate = 1\n").unwrap();
    let o = mtlseg(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtlseg(&[
        "eval",
        "--ckpt",
        s(&dir.path().join("x.ckpt")),
        "--data",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"MTLSEG1\n\x05\x00").unwrap();
    let img = dir.path().join("i.ppm");
    std::fs::write(&img, b"P6\n4 4\n255\n").unwrap();
    let o = mtlseg(&[
        "attn-dump",
        "--ckpt",
        s(&bad),
        "--image",
        s(&img),
        "--task",
        "1",
        "--pixel",
        "0,0",
        "--out",
        s(&dir.path().join("a.pgm")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte"));
}

#[test]
fn numeric_failures_exit_3() {
    let o = mtlseg(&["gradcheck", "--per-param", "1", "--tol", "0"]);
    assert_eq!(code(&o), 3, "{o:?}");

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    Dataset::generate(SceneKind::Crop, 2, 64, 1)
        .unwrap()
        .save(&data)
        .unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "iterations = 20\nbatch_size = 1\nlr = 1e30\n").unwrap();
    let o = mtlseg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 3, "{o:?}");
    assert!(run.join("last_good.ckpt").exists());
    assert!(!run.join("last.ckpt").exists());
}

#[test]
fn gradcheck_passes_on_a_small_sample() {
    let o = mtlseg(&["gradcheck", "--per-param", "2", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("max_rel_err="));
}
