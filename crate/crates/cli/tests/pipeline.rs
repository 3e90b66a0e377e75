use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const TOY: &str = r#"
case = "two-bus"
seed = 5

[data]
samples = 20
labeled = 10

[train]
mode = "M1"
hidden = [8]
batch_size = 4
warmup_epochs = 1
epochs = 3
milestones = [2]
beta = 0.3
"#;

fn semiopf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiopf"))
        .args(["--config", dir.join("run.toml").to_str().unwrap()])
        .args(["--out", dir.join("out").to_str().unwrap()])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn two_bus_pipeline_runs_end_to_end() {
    let dir = setup(TOY);
    let t0 = Instant::now();
    for stage in ["gen-demands", "solve-ref", "pseudo-label", "branch-set"] {
        ok(&semiopf(dir.path(), &[stage]));
    }
    for mode in ["M1", "M4"] {
        ok(&semiopf(dir.path(), &["train", "--mode", mode]));
        ok(&semiopf(dir.path(), &["eval", "--mode", mode]));
    }
    ok(&semiopf(dir.path(), &["report"]));
    assert!(t0.elapsed().as_secs() < 10, "pipeline took {:?}", t0.elapsed());
    let out = dir.path().join("out");
    for f in ["model_M1.bin", "model_M4.bin.meta.json", "train_log_M1.csv", "eval_M4.json", "report.md"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("train_log_M1.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(1).unwrap().contains(",warmup,"));
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("| M1 |") && report.contains("| M4 |"));
}

#[test]
fn eval_without_model_names_the_checkpoint() {
    let dir = setup(TOY);
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let out = semiopf(dir.path(), &["eval", "--mode", "M2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model checkpoint not found"));
}

#[test]
fn missing_prerequisite_is_named() {
    let dir = setup(TOY);
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let out = semiopf(dir.path(), &["pseudo-label"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("labels.json") && err.contains("solve-ref"), "{err}");
}

#[test]
fn demand_file_is_reproducible() {
    let dir = setup(TOY);
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let a = std::fs::read(dir.path().join("out/demands.csv")).unwrap();
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let b = std::fs::read(dir.path().join("out/demands.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 21);
}

#[test]
fn zero_samples_gives_header_only() {
    let dir = setup("case = \"two-bus\"\n[data]\nsamples = 0\nlabeled = 0\n");
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let text = std::fs::read_to_string(dir.path().join("out/demands.csv")).unwrap();
    assert_eq!(text, "pd_1,pd_2,qd_1,qd_2\n");
}

#[test]
fn changed_seed_invalidates_downstream_artifacts() {
    let dir = setup(TOY);
    ok(&semiopf(dir.path(), &["gen-demands"]));
    let out = semiopf(dir.path(), &["--seed", "6", "solve-ref"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = setup("case = \"two-bus\"\n[data]\nsplit = [0.5, 0.5, 0.5]\n");
    assert_eq!(semiopf(dir.path(), &["gen-demands"]).status.code(), Some(2));
    let dir = setup("case = \"no/such/file.m\"\n");
    assert_eq!(semiopf(dir.path(), &["gen-demands"]).status.code(), Some(2));
    let dir = setup("bogus_key = 1\n");
    assert_eq!(semiopf(dir.path(), &["gen-demands"]).status.code(), Some(2));
}

#[test]
fn deterministic_training_is_repeatable() {
    let dir = setup(TOY);
    for stage in ["gen-demands", "solve-ref", "pseudo-label", "branch-set"] {
        ok(&semiopf(dir.path(), &[stage]));
    }
    let read_losses = || {
        let log = std::fs::read_to_string(dir.path().join("out/train_log_M1.csv")).unwrap();
        // total loss column only; wall times differ between runs
        log.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().to_string()).collect::<Vec<_>>()
    };
    ok(&semiopf(dir.path(), &["--deterministic", "train"]));
    let a = read_losses();
    let m1 = std::fs::read(dir.path().join("out/model_M1.bin")).unwrap();
    ok(&semiopf(dir.path(), &["--deterministic", "train"]));
    assert_eq!(a, read_losses());
    assert_eq!(m1, std::fs::read(dir.path().join("out/model_M1.bin")).unwrap());
}
