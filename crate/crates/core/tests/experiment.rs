use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use metaemb::experiment::{
    report_csv_path, run_experiment, run_stages, DatasetSpec, ExperimentConfig, InitPolicy, Stage,
};
use metaemb::metrics::{percentage, MetricKind, Phase};

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn smoke(dir: Option<PathBuf>) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir,
        deterministic: true,
        ..shipped("smoke.json")
    }
}

#[test]
fn smoke_run_emits_every_row() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&smoke(Some(dir.path().to_path_buf()))).unwrap();
    assert!(start.elapsed().as_secs() < 120);
    assert_eq!(report.rows.len(), 2 * 2 * 4);
    for row in &report.rows {
        let anchor = report
            .row(row.model, InitPolicy::Random, row.seed, Phase::Cold)
            .unwrap();
        let auc = percentage(row.auc, anchor.auc, MetricKind::Auc).unwrap();
        let ll = percentage(row.logloss, anchor.logloss, MetricKind::Logloss).unwrap();
        assert!((auc - row.auc_pct).abs() <= 1e-9 && (ll - row.logloss_pct).abs() <= 1e-9);
    }
    for f in ["report.csv", "report.json", "report.txt", "config.json", "STATUS"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(dir.path().join("STATUS")).unwrap().trim(),
        "complete"
    );
    let csv = fs::read_to_string(report_csv_path(dir.path())).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.starts_with("dataset,model,init_policy,phase,seed,auc,logloss,auc_pct,logloss_pct"));
}

#[test]
fn deterministic_reruns_and_staged_runs_agree() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    run_experiment(&smoke(Some(a.path().into()))).unwrap();
    run_experiment(&smoke(Some(b.path().into()))).unwrap();
    let staged = smoke(Some(c.path().into()));
    assert!(run_stages(&staged, Stage::Pretrain, Stage::Pretrain).unwrap().is_none());
    assert!(run_stages(&staged, Stage::MetaTrain, Stage::MetaTrain)
        .unwrap()
        .is_none());
    run_stages(&staged, Stage::Evaluate, Stage::Evaluate).unwrap().unwrap();
    let read = |d: &tempfile::TempDir| fs::read(report_csv_path(d.path())).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
}

#[test]
fn parallel_run_matches_deterministic_run() {
    let det = run_experiment(&smoke(None)).unwrap();
    let par = run_experiment(&ExperimentConfig {
        deterministic: false,
        ..smoke(None)
    })
    .unwrap();
    assert_eq!(det.to_csv().unwrap(), par.to_csv().unwrap());
}

#[test]
fn resuming_without_checkpoints_fails_in_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stages(&smoke(Some(dir.path().into())), Stage::Evaluate, Stage::Evaluate).unwrap_err();
    assert!(matches!(err, metaemb::Error::Stage { .. }), "{err}");
    assert_eq!(
        fs::read_to_string(dir.path().join("STATUS")).unwrap().trim(),
        "incomplete"
    );
    assert!(run_stages(&smoke(None), Stage::MetaTrain, Stage::Evaluate)
        .unwrap_err()
        .is_validation());
}

#[test]
fn bad_configs_are_validation_errors() {
    let mut c = smoke(None);
    c.meta.k = 7;
    assert!(run_experiment(&c).unwrap_err().is_validation());
    let c = ExperimentConfig {
        dataset: DatasetSpec::Csv {
            path: "/nonexistent.csv".into(),
            schema: "/nonexistent.json".into(),
        },
        ..smoke(None)
    };
    assert!(run_experiment(&c).unwrap_err().is_validation());
}

#[test]
fn generated_embeddings_beat_random_cold_start() {
    let report = run_experiment(&shipped("synthetic.json")).unwrap();
    for seed in [1, 2, 3] {
        let get = |p| {
            report
                .row(metaemb::Variant::DeepFm, p, seed, Phase::Cold)
                .unwrap()
                .logloss
        };
        assert!(get(InitPolicy::Meta) < get(InitPolicy::Random), "seed {seed}");
    }
}
