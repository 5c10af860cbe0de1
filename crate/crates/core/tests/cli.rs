use std::path::Path;
use std::process::{Command, Output};

use koopman_bilqr::cli::parse_x0_box;
use koopman_bilqr::io;
use tempfile::TempDir;

fn kbilqr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbilqr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kbilqr(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path, out: &str, n: &str, seed: &str) {
    ok(
        dir,
        &["generate", "--system", "example2", "--n-traj", n, "--horizon", "60", "--seed", seed, "--out", out],
    );
}

#[test]
fn pipeline_round_trip() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    generate(d, "train", "12", "1");
    generate(d, "test", "2", "2");
    let (train, meta) = io::read_batch(&d.join("train"), false).unwrap();
    assert_eq!((train.len(), train.horizon(), meta.system.as_deref()), (12, 60, Some("example2")));

    let fit = ok(d, &["fit", "--data", "train", "--out", "model.json"]);
    assert!(fit.contains("bilinear residual"));
    let ioc = ok(d, &["ioc", "--data", "train", "--model", "model.json", "--out", "cost.json"]);
    assert!(ioc.contains("rank"));
    let cost = io::load_cost(&d.join("cost.json")).unwrap();
    assert_eq!(cost.q.shape(), (4, 4));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("cost.json")).unwrap()).unwrap();
    for key in ["N", "m", "Q", "R", "ls_residual", "diagnostics"] {
        assert!(json.get(key).is_some(), "cost.json lacks {key}");
    }

    ok(
        d,
        &["predict", "--model", "model.json", "--cost", "cost.json", "--x0", "0.4,-0.2", "--horizon", "60", "--out", "pred.csv"],
    );
    let pred = io::read_trajectory_csv(&d.join("pred.csv")).unwrap();
    assert_eq!(pred.horizon(), 60);
    assert_eq!(pred.state(0).as_slice(), &[0.4, -0.2]);
    assert!(d.join("pred.csv.meta.json").exists());

    let eval = ok(
        d,
        &["eval", "--data", "test", "--model", "model.json", "--cost", "cost.json", "--report", "report.json", "--plot-dir", "plots"],
    );
    assert!(eval.contains("state_rmse"));
    assert!(d.join("report.json").exists());
    assert!(d.join("plots/states_0001.svg").exists());
}

#[test]
fn generation_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    generate(d, "a", "3", "42");
    generate(d, "b", "3", "42");
    generate(d, "c", "3", "43");
    let read = |dir: &str| std::fs::read(d.join(dir).join("traj_0002.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn linear_fit_and_baseline_ioc() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["generate", "--system", "example1", "--n-traj", "6", "--horizon", "40", "--seed", "3", "--out", "data"],
    );
    let fit = ok(d, &["fit", "--data", "data", "--out", "lin.json", "--linear"]);
    assert!(fit.contains("linear residual") && fit.contains("bilinear residual"));
    let ioc = ok(d, &["ioc", "--data", "data", "--model", "lin.json", "--out", "cost.json"]);
    assert!(ioc.contains("lemma5 false"));
    let out = kbilqr(
        d,
        &["predict", "--model", "lin.json", "--cost", "cost.json", "--x0", "0.1,0.1", "--horizon", "10", "--out", "p.csv"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&kbilqr(d, &["--help"])), 0);
    assert_eq!(code(&kbilqr(d, &["frobnicate"])), 2);
    assert_eq!(code(&kbilqr(d, &["generate", "--system", "nope", "--out", "x"])), 2);
    assert_eq!(
        code(&kbilqr(d, &["generate", "--system", "example2", "--params", "c=7", "--out", "x"])),
        2
    );
    assert_eq!(
        code(&kbilqr(d, &["generate", "--system", "example2", "--n-traj", "0", "--out", "x"])),
        2
    );
    assert_eq!(code(&kbilqr(d, &["fit", "--data", "missing", "--out", "m.json"])), 3);
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(
        code(&kbilqr(d, &["ioc", "--data", "missing", "--model", "bad.json", "--out", "c.json"])),
        3
    );
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(
        code(&kbilqr(
            d,
            &["eval", "--data", "empty", "--model", "m.json", "--cost", "c.json", "--report", "r.json"]
        )),
        2
    );
    assert_eq!(code(&kbilqr(d, &["repro", "nothing"])), 2);
}

#[test]
fn repro_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ok(d, &["repro", "example2", "--out", "r"]);
    assert!(out.contains("PASS") && !out.contains("FAIL"));
    for f in ["model.json", "cost.json", "report.json", "summary.txt", "data/train/meta.json"] {
        assert!(d.join("r").join(f).exists(), "missing {f}");
    }
}

#[test]
fn x0_box_forms() {
    let b = parse_x0_box("0.5", 2).unwrap();
    assert_eq!((b.lo[1], b.hi[1]), (-0.5, 0.5));
    let b = parse_x0_box("-1:0, 2:3", 2).unwrap();
    assert_eq!((b.lo[0], b.hi[0], b.lo[1], b.hi[1]), (-1.0, 0.0, 2.0, 3.0));
    assert!(parse_x0_box("1:0", 2).is_err());
    assert!(parse_x0_box("1,2,3", 2).is_err());
    assert!(parse_x0_box("x", 2).is_err());
}
