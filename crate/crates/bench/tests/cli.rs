//! Smoke tests of the `ttq` binary.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::process::{Command, Output};

use ttq::io::{read_tt, tt_from_json, write_samples};
use ttq_bench::generators::gen_random_tt;
use ttq_bench::report::read_recovery_table;
use ttq_bench::sampling::observe_tt;

fn ttq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttq")).args(args).env("TTQ_THREADS", "1").output().expect("binary runs")
}

fn write_problem(dir: &Path) -> String {
    let truth = gen_random_tt(&[6, 6, 6], &[1, 2, 2, 1], 5).unwrap();
    let samples = observe_tt(&truth, 150, 6).unwrap();
    let path = dir.join("samples.txt");
    write_samples(&samples, BufWriter::new(File::create(&path).unwrap())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn complete_writes_binary_and_json_results() {
    let dir = tempfile::tempdir().unwrap();
    let samples = write_problem(dir.path());
    let bin = dir.path().join("x.ttq");
    let trace = dir.path().join("trace.csv");
    let out = ttq(&[
        "complete",
        "--samples",
        &samples,
        "--ranks",
        "1,2,2,1",
        "--method",
        "rgnq",
        "--max-iters",
        "30",
        "--output",
        bin.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let x = read_tt(File::open(&bin).unwrap()).unwrap();
    assert_eq!(x.ranks(), vec![1, 2, 2, 1]);
    let truth = gen_random_tt(&[6, 6, 6], &[1, 2, 2, 1], 5).unwrap();
    assert!(x.relative_error(&truth).unwrap() < 1e-6);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iter,"));

    let json = dir.path().join("x.json");
    let out = ttq(&["complete", "--samples", &samples, "--ranks", "1,2,2,1", "--output", json.to_str().unwrap()]);
    assert!(out.status.success());
    let y = tt_from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(y.dims(), vec![6, 6, 6]);
}

#[test]
fn complete_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let samples = write_problem(dir.path());
    let out_path = dir.path().join("x.ttq");
    let out = ttq(&["complete", "--samples", &samples, "--ranks", "1,2,1", "--output", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ranks"));
    let missing = dir.path().join("missing.txt");
    let out = ttq(&["complete", "--samples", missing.to_str().unwrap(), "--ranks", "1,2,2,1", "--output", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn recover_emits_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("rec");
    let out = ttq(&[
        "recover",
        "--dims",
        "8,8,8",
        "--ranks",
        "1,2,2,1",
        "--trials",
        "2",
        "--methods",
        "rgdq,rgne",
        "--traces",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_recovery_table(File::open(out_dir.join("recovery.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.trials == 2));
    assert!(out_dir.join("trials_0.csv").exists());
}

#[test]
fn converge_and_interpolate_run() {
    let dir = tempfile::tempdir().unwrap();
    let conv = dir.path().join("conv");
    let out =
        ttq(&["converge", "--dims", "6,6,6", "--ranks", "1,2,2,1", "--os", "4", "--methods", "rgnq,rgdq", "--out", conv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("RGN(Q)"));

    let interp = dir.path().join("interp");
    let out = ttq(&[
        "interpolate",
        "--function",
        "inv-norm",
        "--dims",
        "8,8,8",
        "--max-ranks",
        "1,2,2,1",
        "--ratio",
        "0.3",
        "--holdout",
        "20",
        "--out",
        interp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(interp.join("interpolation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
