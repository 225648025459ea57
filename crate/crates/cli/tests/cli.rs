use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cheapnvs::io::read_rgb;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cheapnvs"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/real")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cheapnvs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &[&str] = &["--base-channels", "4", "--encoder-stages", "2", "--extrinsics-hidden", "8", "--extrinsics-out", "8"];

/// Trains a tiny model on generated scenes and returns its checkpoint.
fn tiny_checkpoint(dir: &Path, epochs: usize) -> PathBuf {
    let out = dir.join(format!("train{epochs}"));
    let epochs = epochs.to_string();
    let mut args = vec!["train", "--synthetic", "2", "--synthetic-size", "16", "--crop", "16", "--batch-size", "2", "--epochs", &epochs, "--out", s(&out)];
    args.extend_from_slice(TINY_MODEL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen-data", "--root", s(&fixtures()), "--out", s(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 4 * 5);
    assert!(ta.iter().any(|(p, _)| p == Path::new("shift/astronaut.nvss")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("mask/rocket.png")));
    assert_eq!(ta, tb);

    let c = dir.path().join("c");
    run(&["gen-data", "--root", s(&fixtures()), "--out", s(&c), "--seed", "8"]);
    assert_ne!(tree(&c), ta, "a different seed must change the poses");
}

#[test]
fn gen_data_shift_file_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--root", s(&fixtures()), "--out", s(dir.path()), "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("shift/chelsea.nvss")).unwrap();
    assert_eq!(&bytes[..4], b"NVSS");
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    assert_eq!((u(4), u(8), u(12)), (64, 64, 2));
    assert_eq!(bytes.len(), 16 + 64 * 64 * 2 * 4);
}

#[test]
fn infer_identity_pose_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 0);
    let out = dir.path().join("infer");
    let image = fixtures().join("rgb/coffee.png");
    let o = run(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--depth", s(&fixtures().join("depth/coffee.nvsd")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["synth.png", "shift.png", "shift.nvss", "mask.png", "inpaint.png", "warped.png"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let a = read_rgb::<f64>(&image).unwrap();
    let b = read_rgb::<f64>(&out.join("synth.png")).unwrap();
    let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-9, "max difference {worst}");
}

#[test]
fn eval_oracle_reports_caps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--oracle", "--root", s(&fixtures()), "--seed", "1", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = stdout(&o).lines().find(|l| l.starts_with("oracle")).unwrap().to_string();
    assert_eq!(row.matches("100.00").count(), 2, "{row}");
    assert_eq!(row.matches("1.000").count(), 3, "{row}");
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("oracle,absent,100.0000,1.0000"), "{csv}");
}

#[test]
fn train_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 2);
    let log = fs::read_to_string(ckpt.with_file_name("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let o = run(&["eval", "--ckpt", s(&ckpt), "--root", s(&fixtures())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("model")));

    let out = dir.path().join("bench");
    let o = run(&["bench", "--ckpt", s(&ckpt), "--mode", "both", "--res", "16,8x24", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[10] == "1"), "one encoder pass per frame");
    assert_eq!(rows[0][12], rows[1][12], "modes agree");
    assert!(out.join("bench.txt").is_file());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let from_file = dir.path().join("from-file");
    fs::write(
        &cfg,
        format!(
            "[train]\nsynthetic = 1\nsynthetic-size = 16\ncrop = 16\nepochs = 3\nbase-channels = 4\nencoder-stages = 2\nextrinsics-out = 8\nout = {:?}\n",
            s(&from_file)
        ),
    )
    .unwrap();
    let o = bin().args(["--config", s(&cfg), "train", "--epochs", "1"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(from_file.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "flag value wins over the file");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let o = run(&["train", "--synthetic", "1", "--crop", "15", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let o = run(&["bench", "--res", "16", "--runs", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = run(&["eval", "--oracle", "--root", s(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = run(&["bench", "--ckpt", s(&bad), "--res", "16"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[gen-data]\nunknown-key = 1\n").unwrap();
    let o = run(&["--config", s(&cfg), "gen-data"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}
