use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use omni_align::evalkit::MetricsReport;
use omni_align::io::Checkpoint;
use omni_align_cli::commands::{AblationRow, Envelope, GradcheckResult, ABLATION_HEADER};

const SMALL: [&str; 6] = [
    "--set",
    "train.total_steps=120",
    "--set",
    "train.t0=30",
    "--set",
    "world.pairs=300",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omni-align"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn small(cmd: &str) -> Vec<&str> {
    let mut v = vec![cmd];
    v.extend(SMALL);
    v
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_pipeline_reports_hit_at_1() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen", "train", "eval"] {
        ok(dir.path(), &[cmd]);
    }
    let metrics: Envelope<MetricsReport> = read(&dir.path().join("metrics/metrics.json"));
    assert!((0.0..=1.0).contains(&metrics.result.hit_at_1));
    assert_eq!(metrics.seed, 42);
    assert_eq!(metrics.config_hash, metrics.config.hash());
    let ckpt =
        Checkpoint::from_json(&fs::read_to_string(dir.path().join("ckpt/model.json")).unwrap())
            .unwrap();
    assert_eq!(
        ckpt.config_hash.as_deref(),
        Some(metrics.config_hash.as_str())
    );
    let log = fs::read_to_string(dir.path().join("logs/steps.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains(&metrics.config_hash));
    assert_eq!(log.lines().count(), 1 + 2000);
    let header = fs::read_to_string(dir.path().join("dataset/dataset.jsonl")).unwrap();
    assert!(header
        .lines()
        .next()
        .unwrap()
        .contains(&metrics.config.dataset_hash()));
}

#[test]
fn gradcheck_on_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r: Envelope<GradcheckResult> = read(&dir.path().join("metrics/gradcheck.json"));
    assert!(r.result.max_rel_error <= 1e-4);
    assert_eq!(r.result.seeds.len(), 5);
}

#[test]
fn gradcheck_fails_loudly_above_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["gradcheck", "--set", "gradcheck.tolerance=1e-30"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small("ablate");
    args.extend(["--set", "ablate.seeds=[1,2]"]);
    ok(dir.path(), &args);
    let csv = fs::read_to_string(dir.path().join("metrics/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "full",
            "no_calibration",
            "no_curriculum",
            "no_dcl",
            "no_whitening_coral"
        ]
    );
    let json: Envelope<Vec<AblationRow>> = read(&dir.path().join("metrics/ablation.json"));
    assert_eq!(json.result.len(), 5);
    assert!(json.result.iter().all(|r| r.runs.len() == 2));
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small("sweep");
    args.extend([
        "--set",
        "sweep.validation=60",
        "--set",
        r#"sweep.grid={"rho_final":[0.3,0.5,0.7]}"#,
    ]);
    ok(dir.path(), &args);
    let csv = fs::read_to_string(dir.path().join("metrics/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("rho_final,hit_at_1,"));
}

#[test]
fn unknown_keys_exit_2_and_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen", "--set", "world.nosie_scale=[1,1,1,1]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nosie_scale"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"toggles": {"whitening": false}}}"#).unwrap();
    let o = run(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.toggles.whitening"), "{err}");
    assert!(!dir.path().join("ckpt").exists());
}

#[test]
fn flags_override_the_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "train": {"total_steps": 10, "t0": 2, "learning_rate": 0.5}, "world": {"pairs": 200}}"#)
        .unwrap();
    let c = cfg.to_str().unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--config",
            c,
            "--set",
            "train.learning_rate=0.001",
            "--seed",
            "9",
        ],
    );
    ok(
        dir.path(),
        &[
            "eval",
            "--config",
            c,
            "--set",
            "train.learning_rate=0.001",
            "--seed",
            "9",
        ],
    );
    let m: Envelope<MetricsReport> = read(&dir.path().join("metrics/metrics.json"));
    assert_eq!(m.seed, 9);
    assert_eq!(m.config.train.learning_rate, 0.001);
    assert_eq!(m.config.train.total_steps, 10);
}

#[test]
fn numerical_failure_exits_3_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small("train");
    args.extend(["--set", "train.learning_rate=1e300"]);
    let o = run(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
    assert!(!dir.path().join("ckpt/model.json").exists());
    // the records before the failure are kept
    assert!(
        fs::read_to_string(dir.path().join("logs/steps.jsonl"))
            .unwrap()
            .lines()
            .count()
            >= 2
    );
}

#[test]
fn a_dataset_from_another_world_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &small("gen"));
    let mut args = small("train");
    args.extend(["--seed", "3"]);
    assert_eq!(run(dir.path(), &args).status.code(), Some(2));
}

#[test]
fn eval_without_a_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &small("eval"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run train first"));
}

#[test]
fn reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for out in [&a, &b] {
        for cmd in ["gen", "train", "eval", "diagnose"] {
            ok(out, &small(cmd));
        }
    }
    for f in [
        "dataset/dataset.jsonl",
        "ckpt/model.json",
        "logs/steps.jsonl",
        "metrics/metrics.json",
        "diagnostics/diagnostics.json",
        "diagnostics/pca_points.csv",
        "diagnostics/heatmap.csv",
        "diagnostics/heatmap_init.csv",
        "diagnostics/pca.svg",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
