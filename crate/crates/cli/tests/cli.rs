use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn metaemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaemb"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn smoke_config() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/smoke.json")
        .to_string_lossy()
        .into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn run_all(dir: &Path, extra: &[&str]) -> Output {
    let cfg = smoke_config();
    let mut args = vec![
        "run-all",
        "--config",
        &cfg,
        "--deterministic",
        "--output-dir",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    metaemb(&args)
}

#[test]
fn run_all_writes_sixteen_rows_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = run_all(a.path(), &["--svg"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read(a.path().join("report.csv")).unwrap();
    assert_eq!(csv.iter().filter(|&&c| c == b'\n').count(), 17);
    assert!(a.path().join("report.svg").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
    assert_eq!(code(&run_all(b.path(), &[])), 0);
    assert_eq!(csv, fs::read(b.path().join("report.csv")).unwrap());
}

#[test]
fn staged_subcommands_resume_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let d = dir.path().to_str().unwrap();
    for cmd in ["pretrain", "meta-train", "evaluate"] {
        let out = metaemb(&[cmd, "-c", &cfg, "--deterministic", "--output-dir", d, "models=deepfm"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_all(dir.path(), &["--meta.alpha=0.5", "models=fm", "seeds=[4]"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["meta"]["alpha"], 0.5);
    assert_eq!(cfg["models"], serde_json::json!(["fm"]));
    assert_eq!(cfg["seeds"], serde_json::json!([4]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_all(dir.path(), &["--no.such.key=1"])), 1);
    assert_eq!(code(&run_all(dir.path(), &["dim=1"])), 1);
    assert_eq!(code(&metaemb(&["frobnicate"])), 1);
    assert_eq!(code(&metaemb(&["evaluate", "-c", "/nonexistent/config.json"])), 1);
    let empty = tempfile::tempdir().unwrap();
    let out = metaemb(&[
        "evaluate",
        "-c",
        &smoke_config(),
        "--output-dir",
        empty.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&metaemb(&["--help"])), 0);
}

#[test]
fn grad_check_passes_and_rejects_large_models() {
    let out = metaemb(&["grad-check", "models=fm,deepfm", "meta_configs=2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert_eq!(code(&metaemb(&["grad-check", "dim=256"])), 1);
}

#[test]
fn synth_gen_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = metaemb(&["synth-gen", "--out", d, "tiers=[{\"ads\":6,\"samples\":30}]", "seed=3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["data.csv", "schema.json", "truth.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let data = metaemb::data::load_csv(&dir.path().join("data.csv"), &dir.path().join("schema.json")).unwrap();
    assert_eq!(data.instances.len(), 180);
    assert_eq!(code(&metaemb(&["synth-gen", "--out", d, "bogus=1"])), 1);
}
