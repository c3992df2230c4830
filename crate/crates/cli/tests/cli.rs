use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eviscrib"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_from_generation_to_uncertainty_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    run(&[
        "gen-data",
        "--out",
        s(&data),
        "--count",
        "4",
        "--size",
        "32x32",
        "--seed",
        "3",
    ]);
    assert!(data.join("manifest.txt").exists());
    run(&["make-scribbles", "--data", s(&data), "--seed", "11"]);
    assert!(data.join("scribbles/00000.png").exists());

    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        format!(
            "dataset = {}\nout_dir = {}\niter_max = 3\nbatch_size = 2\ncheckpoint_interval = 2\nseed = 5\n",
            data.display(),
            run_dir.display()
        ),
    )
    .unwrap();
    run(&["train", "--config", s(&cfg)]);
    let log = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("iter,loss_total,"));
    let ckpt = run_dir.join("cnn.ckpt");
    assert!(ckpt.exists() && run_dir.join("mamba.ckpt").exists());

    let preds = tmp.path().join("pred");
    let eval = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--predictions",
        s(&preds),
    ]);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.starts_with("class,dice,jaccard,hd95,asd\n"), "{text}");
    assert!(text.contains("\nmean,"));
    assert!(preds.join("00003.png").exists());

    let export = tmp.path().join("sweep");
    let sweep = run(&[
        "robustness",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--sigmas",
        "0,0.1",
        "--export",
        s(&export),
    ]);
    assert_eq!(String::from_utf8(sweep.stdout).unwrap().lines().count(), 3);
    assert!(export.join("sigma_0.10/00001.png").exists());

    let maps = tmp.path().join("maps");
    run(&[
        "export-uncertainty",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&maps),
    ]);
    let img = image::open(maps.join("00002.png")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (32, 32));
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eviscrib"))
        .args(["train", "--config", s(&cfg)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `learning_rate`"));
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let gone = tmp.path().join("nowhere");
    let out = Command::new(env!("CARGO_BIN_EXE_eviscrib"))
        .args(["eval", "--checkpoint", "x.ckpt", "--data", s(&gone)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}
