//! End-to-end CLI behavior: exit codes, reproducibility, file outputs.

use std::path::{Path, PathBuf};
use std::process::Command;

fn pcat(args: &[&str]) -> (String, String, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_pcat"))
        .args(args)
        .output()
        .expect("spawn pcat");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.code().unwrap_or(-1),
    )
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pcat_cli_{name}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_lists_flags_with_defaults() {
    for sub in ["gen", "train", "eval", "segment", "tokenize", "bench"] {
        let (stdout, _, code) = pcat(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub} --help");
        assert!(stdout.contains("--help"), "{sub}: {stdout}");
    }
    let (stdout, _, _) = pcat(&["gen", "--help"]);
    assert!(stdout.contains("--seed") && stdout.contains("default: 0"));
    assert!(stdout.contains("--points") && stdout.contains("default: 1024"));
    let (stdout, _, _) = pcat(&["bench", "--help"]);
    assert!(stdout.contains("default: 1024,2048,4096,8192"));
}

#[test]
fn usage_errors_exit_one() {
    let (_, stderr, code) = pcat(&["train", "--no-such-flag"]);
    assert_eq!(code, 1);
    assert!(!stderr.is_empty());
    let (_, _, code) = pcat(&["gen", "--kind", "nope", "--out", "/tmp/x"]);
    assert_eq!(code, 1, "unknown synthetic kind is a usage error");
}

#[test]
fn missing_files_exit_two_and_name_the_path() {
    let (_, stderr, code) = pcat(&[
        "eval",
        "--data",
        "/nonexistent_pcat_dir",
        "--ckpt",
        "/nonexistent_pcat.pcck",
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("/nonexistent_pcat"), "{stderr}");

    let (_, stderr, code) = pcat(&[
        "segment",
        "--cloud",
        "/nonexistent_cloud.pcb",
        "--ckpt",
        "/nonexistent.pcck",
        "--out",
        "/tmp/out.txt",
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("/nonexistent_cloud.pcb"), "{stderr}");
}

#[test]
fn gen_is_reproducible_under_seed() {
    let dir = workdir("gen_repro");
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        let (_, err, code) = pcat(&[
            "gen", "--kind", "cls3", "--out", out.to_str().unwrap(), "--n", "6", "--points",
            "64", "--seed", "9",
        ]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(
        std::fs::read(a.join("manifest.txt")).unwrap(),
        std::fs::read(b.join("manifest.txt")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("sample_00000.pcb")).unwrap(),
        std::fs::read(b.join("sample_00000.pcb")).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

fn train_tiny(dir: &Path, task: &str, data: &Path, seed: &str) -> PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "tokens=12,4\nks=2,4\nout_dim_per_scale=4\nd_model=8\nheads=2\nd_ff=16\nk_neighbors=4\nradii=0.6,1.2\nhead_hidden=8\ndecoder_dim=8\nepochs=2\nbatch_size=4\n",
    )
    .unwrap();
    let ckpt = dir.join(format!("{task}.pcck"));
    let (stdout, err, code) = pcat(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--task",
        task,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    assert_eq!(code, 0, "train failed: {err}");
    assert!(stdout.contains("epoch=1") && stdout.contains("loss="), "{stdout}");
    assert!(ckpt.exists());
    assert!(ckpt.with_extension("log").exists(), "per-epoch log file");
    ckpt
}

#[test]
fn pipeline_gen_train_eval_segment_tokenize() {
    let dir = workdir("pipeline");
    let data = dir.join("data");
    let (_, err, code) = pcat(&[
        "gen", "--kind", "seg2", "--out", data.to_str().unwrap(), "--n", "8", "--points",
        "48", "--seed", "4",
    ]);
    assert_eq!(code, 0, "{err}");

    let ckpt = train_tiny(&dir, "segmentation", &data, "3");

    // eval prints key=value metrics and writes the report file
    let report = dir.join("report.txt");
    let (stdout, err, code) = pcat(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    for key in ["oa=", "macc=", "ins_miou=", "cat_miou="] {
        assert!(stdout.contains(key), "missing {key} in:\n{stdout}");
    }
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("oa="));

    // segment a cloud; the labeled output round-trips through the loader
    let sample = data.join("sample_00000.pcb");
    let labeled = dir.join("labeled.txt");
    let (_, err, code) = pcat(&[
        "segment",
        "--cloud",
        sample.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        labeled.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let cloud: pcat::PointCloud32 =
        pcat::data::load_cloud(&labeled, pcat::data::CloudFormat::Text).unwrap();
    assert_eq!(cloud.len(), 48);
    assert!(cloud.labels().is_some(), "label column present");

    // tokenize dump
    let dump = dir.join("tokens.txt");
    let cfgfile = dir.join("tok.cfg");
    std::fs::write(&cfgfile, "tokens=8\nks=2,4\nout_dim_per_scale=4\nd_model=8\nradii=0.8\n")
        .unwrap();
    let (_, err, code) = pcat(&[
        "tokenize",
        "--cloud",
        sample.to_str().unwrap(),
        "--config",
        cfgfile.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&dump).unwrap();
    assert!(text.contains("centroid 0") && text.contains("scale 0") && text.contains("token="));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn training_is_reproducible_under_seed() {
    let dir = workdir("train_repro");
    let data = dir.join("data");
    let (_, err, code) = pcat(&[
        "gen", "--kind", "cls3", "--out", data.to_str().unwrap(), "--n", "9", "--points",
        "48", "--seed", "4",
    ]);
    assert_eq!(code, 0, "{err}");
    let a = train_tiny(&dir, "classification", &data, "5");
    let log_a = std::fs::read_to_string(a.with_extension("log")).unwrap();
    std::fs::rename(&a, dir.join("first.pcck")).unwrap();
    let b = train_tiny(&dir, "classification", &data, "5");
    let log_b = std::fs::read_to_string(b.with_extension("log")).unwrap();
    assert_eq!(log_a, log_b, "same seed, same trajectory");
    assert_eq!(
        std::fs::read(dir.join("first.pcck")).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed, same checkpoint bytes"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_prints_table_and_slope() {
    let dir = workdir("bench");
    let cfg = dir.join("bench.cfg");
    std::fs::write(
        &cfg,
        "tokens=12,4\nks=2,4\nout_dim_per_scale=4\nd_model=8\nheads=2\nd_ff=16\nk_neighbors=4\nradii=0.6,1.2\n",
    )
    .unwrap();
    let (stdout, err, code) = pcat(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--points",
        "64,128",
        "--repeats",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("count median_ms"), "{stdout}");
    assert!(stdout.contains("loglog_slope="), "{stdout}");
    std::fs::remove_dir_all(&dir).ok();
}
