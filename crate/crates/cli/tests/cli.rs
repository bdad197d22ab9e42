use std::path::Path;
use std::process::{Command, Output};

fn kslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kslab"))
        .args(args)
        .env("KSLAB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kslab(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(path: &Path, data: &Path) {
    let cfg = serde_json::json!({
        "run_id": "cli",
        "dataset": data,
        "seed": 3,
        "detector": "train",
        "detector_training": { "epochs": 3 },
        "segmenter_training": { "epochs": 2, "learning_rate": 0.01, "batch_size": 8 },
        "sharpness": false,
        "sweep": { "z_values": [2, 8] }
    });
    std::fs::write(path, cfg.to_string()).unwrap();
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    ok(&[
        "phantom",
        "gen",
        "--out",
        p(&data),
        "--cases",
        "5",
        "--tiny",
        "--seed",
        "9",
    ]);
    write_config(&cfg, &data);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["run", "--config", p(&cfg), "--output", p(&a)]);
    ok(&["run", "--config", p(&cfg), "--output", p(&b)]);
    for f in ["metrics.csv", "losses.csv", "residuals.csv", "run_manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let report = ok(&["report", p(&a)]);
    assert!(report.contains("corrected"));
    assert!(report.contains("mean losses"));
}

#[test]
fn flag_overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    ok(&["phantom", "gen", "--out", p(&data), "--cases", "5", "--tiny"]);
    write_config(&cfg, &data);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["run", "--config", p(&cfg), "--output", p(&a), "--oracle-mask"]);
    ok(&[
        "run",
        "--config",
        p(&cfg),
        "--output",
        p(&b),
        "--oracle-mask",
        "--dc-iterations",
        "2",
        "--tv-weight",
        "0",
    ]);
    let read = |d: &Path| std::fs::read_to_string(d.join("run_manifest.json")).unwrap();
    let (ma, mb) = (read(&a), read(&b));
    assert_ne!(ma, mb);
    let mb: serde_json::Value = serde_json::from_str(&mb).unwrap();
    assert_eq!(mb["config"]["correction"]["iterations"], 2);
    assert_eq!(mb["config"]["correction"]["spatial_tv_weight"], 0.0);
    assert_eq!(mb["config"]["detector"], "oracle");
}

#[test]
fn stagewise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let cfg = d.join("cfg.json");
    ok(&["phantom", "gen", "--out", p(&data), "--cases", "5", "--tiny"]);
    write_config(&cfg, &data);
    let image = data.join("case_0000").join("image");
    let acq = d.join("acq");
    ok(&[
        "corrupt",
        "--image",
        p(&image),
        "--out",
        p(&acq),
        "--z",
        "4",
        "--seed",
        "1",
    ]);
    for f in [
        "kspace.json",
        "kspace.bin",
        "clean_kspace.json",
        "mask.json",
        "record.json",
    ] {
        assert!(acq.join(f).exists(), "{f}");
    }
    let model = d.join("detector");
    ok(&["detect", "--train-detector", "--config", p(&cfg), "--model", p(&model)]);
    ok(&[
        "detect",
        "--kspace",
        p(&acq.join("kspace")),
        "--model",
        p(&model),
        "--out",
        p(&d.join("flagged")),
    ]);
    let fixed = d.join("fixed");
    ok(&[
        "correct",
        "--kspace",
        p(&acq.join("kspace")),
        "--mask",
        p(&acq.join("mask")),
        "--out",
        p(&fixed),
        "--dc-iterations",
        "3",
    ]);
    let log = std::fs::read_to_string(fixed.join("residuals.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let seg = d.join("seg");
    ok(&[
        "segment",
        "--train-segmenter",
        "--config",
        p(&cfg),
        "--seg-model",
        p(&seg),
    ]);
    ok(&[
        "segment",
        "--image",
        p(&image),
        "--seg-model",
        p(&seg),
        "--out",
        p(&d.join("labels")),
    ]);
    assert!(d.join("labels.bin").exists());
}

#[test]
fn sweep_uses_configured_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("out");
    ok(&["phantom", "gen", "--out", p(&data), "--cases", "5", "--tiny"]);
    write_config(&cfg, &data);
    let table = ok(&[
        "sweep",
        "--config",
        p(&cfg),
        "--output",
        p(&out),
        "--axis",
        "z",
        "--oracle-mask",
    ]);
    assert_eq!(table.lines().count(), 3);
    let csv = std::fs::read_to_string(out.join("sweep_z.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = kslab(&["run", "--dataset", p(&missing), "--output", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = kslab(&["run", "--dataset", p(&missing), "--detector-threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kslab(&["sweep", "--axis", "q"]);
    assert_eq!(out.status.code(), Some(2));
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ \"seed\": ").unwrap();
    let out = kslab(&["run", "--config", p(&broken)]);
    assert_eq!(out.status.code(), Some(2));

    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    ok(&["phantom", "gen", "--out", p(&data), "--cases", "10", "--tiny"]);
    write_config(&cfg, &data);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let victim = manifest["cases"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["split"] == "test")
        .unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    std::fs::write(data.join(victim).join("image.bin"), [0u8; 3]).unwrap();
    let out = kslab(&[
        "run",
        "--config",
        p(&cfg),
        "--output",
        p(&dir.path().join("o")),
        "--oracle-mask",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_kslab"))
        .args(["report", p(&dir.path().join("o"))])
        .env("KSLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
