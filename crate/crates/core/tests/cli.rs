use std::path::Path;
use std::process::{Command, Output};

use risfuse::imaging::{read_image, read_mask, write_mask, Mask};
use risfuse::metrics::MetricsReport;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_risfuse")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_data_train_eval_fuse_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("toy");
    let out = cli(&["make-toy-data", "--n", "6", "--test-n", "2", "--size", "32", "--seed", "1", "--text-dim", "8", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("train.jsonl").exists() && data.join("test.jsonl").exists());

    let config = d.join("cfg.toml");
    std::fs::write(
        &config,
        "steps = 3\nbatch = 2\nsize = 32\ntext_dim = 8\nfusion_channels = [2, 4, 4, 4]\nseg_channels = [2, 4, 4]\n",
    )
    .unwrap();
    let (ckpt, log) = (d.join("m.ckpt"), d.join("log.jsonl"));
    let manifest = data.join("train.jsonl");
    let train_args = ["train", "--data", s(&manifest), "--config", s(&config), "--out-ckpt", s(&ckpt), "--log", s(&log)];
    let out = cli(&train_args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first_log = std::fs::read(&log).unwrap();
    assert_eq!(first_log.iter().filter(|&&b| b == b'\n').count(), 3);
    // same config and seed reproduce the log byte for byte
    assert_eq!(code(&cli(&train_args)), 0);
    assert_eq!(std::fs::read(&log).unwrap(), first_log);

    let report = d.join("report.json");
    let out = cli(&["eval", "--data", s(&data.join("test.jsonl")), "--ckpt", s(&ckpt), "--report", s(&report)]);
    assert_eq!(code(&out), 0);
    let metrics: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(metrics.per_sample_iou.len(), 2);
    assert!(stdout(&out).contains("mIoU"));

    let fused = d.join("fused.png");
    let overlay = d.join("overlay.png");
    let out = cli(&[
        "fuse", "--ir", s(&data.join("toy0000_ir.png")), "--vis", s(&data.join("toy0000_vis.png")),
        "--emb", s(&data.join("toy0000.teb")), "--ckpt", s(&ckpt), "--out", s(&fused), "--overlay", s(&overlay),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = read_image(&fused).unwrap();
    assert_eq!((img.channels(), img.height(), img.width()), (3, 32, 32));
    assert!(overlay.exists());
    let out = cli(&[
        "fuse", "--ir", s(&data.join("toy0000_ir.png")), "--vis", s(&data.join("toy0000_vis.png")),
        "--text", "hot blob upper left", "--ckpt", s(&ckpt), "--out", s(&d.join("fused2.png")),
    ]);
    assert_eq!(code(&out), 0);

    let out = cli(&["report", &format!("a={}", s(&report)), &format!("b={}", s(&report)), "--format", "csv"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("run,P@0.5"));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn split_regions_writes_one_file_per_component() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("m.png");
    write_mask(&Mask::from_fn(8, 8, |i, j| (i < 2 && j < 2) || (i > 5 && j > 5) || (i == 2 && j == 2)), &mask).unwrap();
    let out_dir = dir.path().join("regions");
    let out = cli(&["split-regions", "--mask", s(&mask), "--out-dir", s(&out_dir), "--connectivity", "4"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("3 regions"));
    assert_eq!(read_mask(out_dir.join("region_002.png")).unwrap().count(), 4);
    let out = cli(&["split-regions", "--mask", s(&mask), "--out-dir", s(&out_dir), "--connectivity", "6"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let junk = d.join("junk.png");
    std::fs::write(&junk, "not an image").unwrap();
    let ckpt = d.join("missing.ckpt");
    let out = cli(&["fuse", "--ir", s(&junk), "--vis", s(&junk), "--text", "x", "--ckpt", s(&ckpt), "--out", s(&d.join("o.png"))]);
    // the checkpoint is opened first and is missing: an I/O failure
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    // a truncated checkpoint is malformed input
    let bad_ckpt = d.join("bad.ckpt");
    std::fs::write(&bad_ckpt, "RFCK").unwrap();
    let out = cli(&["eval", "--data", s(&junk), "--ckpt", s(&bad_ckpt), "--report", s(&d.join("r.json"))]);
    assert_eq!(code(&out), 2);

    let config = d.join("cfg.toml");
    std::fs::write(&config, "steps = 0\n").unwrap();
    let out = cli(&["train", "--data", s(&junk), "--config", s(&config), "--out-ckpt", s(&d.join("m.ckpt"))]);
    assert_eq!(code(&out), 2);

    // clap usage errors also exit with 2
    assert_eq!(code(&cli(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&cli(&["report", "no-equals-sign"])), 2);
}

#[test]
fn gradcheck_subcommand_reports_each_case() {
    let out = cli(&["gradcheck", "--module", "lga"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("ok")).count() >= 3);
    assert!(text.contains("0 failed"));
}
