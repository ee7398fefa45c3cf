use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kanoclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kanoclip")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/kb_fixture.json")
}

/// The shipped synthetic config with its paths pointing into `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let text = std::fs::read_to_string(shipped)
        .unwrap()
        .replace("../crates/core/fixtures/kb_fixture.json", &fixture().display().to_string())
        .replace("../work/", "")
        .replace("epochs = 5", "epochs = 1");
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_kb_train_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir);
    let cfg = cfg.to_str().unwrap();

    let out = kanoclip(dir, &["make-synth", "--out", "aux", "--count", "16", "--class", "carpet", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = kanoclip(dir, &["make-synth", "--out", "target", "--count", "12", "--class", "tile", "--seed", "2"]);
    assert_eq!(code(&out), 0);

    let out = kanoclip(dir, &["build-kb", "-c", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("kb.json").is_file());

    let out = kanoclip(dir, &["train", "-c", cfg, "--out", "a.kck", "--log", "a.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out2 = kanoclip(dir, &["train", "-c", cfg, "--out", "b.kck", "--log", "b.csv"]);
    assert_eq!(code(&out2), 0);
    assert_eq!(std::fs::read(dir.join("a.kck")).unwrap(), std::fs::read(dir.join("b.kck")).unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).contains("sha256"));
    assert!(std::fs::read_to_string(dir.join("a.csv")).unwrap().lines().count() > 1);

    let out = kanoclip(dir, &["eval", "-c", cfg, "--checkpoint", "a.kck", "--out", "report"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("image_auc") && stdout.contains("pixel_auc"), "{stdout}");
    let heatmaps = std::fs::read_dir(dir.join("report/heatmaps")).unwrap().count();
    assert_eq!(heatmaps, 12);

    let image = std::fs::read_dir(dir.join("target/tile/test/good")).unwrap().next().unwrap().unwrap().path();
    let out =
        kanoclip(dir, &["infer", "--checkpoint", "a.kck", "--class", "tile", "--out", "maps", image.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(line["score"]["s_global"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read_dir(dir.join("maps")).unwrap().count(), 1);

    let out = kanoclip(dir, &["eval", "-c", cfg, "--checkpoint", "a.kck", "--target", "aux", "--out", "r2"]);
    assert_eq!(code(&out), 2, "evaluating on the auxiliary set must be refused");
    let out = kanoclip(
        dir,
        &["eval", "-c", cfg, "--checkpoint", "a.kck", "--target", "aux", "--out", "r2", "--allow-overlap"],
    );
    assert_eq!(code(&out), 0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "seed = \"zero\"\n").unwrap();
    assert_eq!(code(&kanoclip(dir, &["build-kb", "-c", "bad.toml"])), 2);

    let cfg = write_config(dir);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&kanoclip(dir, &["build-kb", "-c", cfg])), 3, "auxiliary directory is missing");
    assert_eq!(code(&kanoclip(dir, &["--device", "cuda", "build-kb", "-c", cfg])), 2);
    assert_eq!(code(&kanoclip(dir, &["infer", "--checkpoint", "nope.kck", "--class", "x", "y.png"])), 3);

    let text = std::fs::read_to_string(cfg).unwrap().replace("learning_rate = 1e-3", "learning_rate = -1.0");
    std::fs::write(dir.join("neg.toml"), text).unwrap();
    assert_eq!(code(&kanoclip(dir, &["train", "-c", "neg.toml"])), 2);
}
