use std::path::Path;
use std::process::{Command, Output};

fn ppgnas(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ppgnas"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ppgnas(dir, args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{args:?} failed\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const TOY: &str = r#"{
    "channels": [4, 8],
    "nas_lambdas": [0.0, 0.01],
    "pit_lambdas": [0.0, 0.01],
    "mps_lambdas": [0.0, 0.0001],
    "seed_epochs": 3,
    "warmup_epochs": 1,
    "search_epochs": 2,
    "finetune_epochs": 1,
    "ft_epochs": 2,
    "batch_size": 16
}"#;

#[test]
fn full_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("toy.json"), TOY).unwrap();

    ok(
        d,
        &[
            "synth-data",
            "--out",
            "data",
            "--subjects",
            "8",
            "--seconds",
            "30",
            "--seed",
            "4",
        ],
    );
    assert!(d.join("data/S000.csv").exists() && d.join("data/truth.json").exists());
    let s = ok(d, &["preprocess", "--input", "data", "--folds", "4"]);
    assert!(s.contains("8 subjects"), "{s}");
    assert!(d.join("windows.json").exists() && d.join("splits.json").exists());

    // pruning needs the search points first
    let out = ppgnas(d, &["prune", "-c", "toy.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("points.csv"));

    let s = ok(d, &["nas", "-c", "toy.json"]);
    assert!(s.contains("nas/lam01"), "{s}");
    // a rerun reuses the artifacts
    assert!(ok(d, &["nas", "-c", "toy.json"]).contains("2 runs, 2 reused"));
    ok(d, &["prune", "-c", "toy.json"]);
    let s = ok(d, &["mps", "-c", "toy.json", "--set", "mps_lambdas=[0.001]"]);
    let model = s
        .lines()
        .find_map(|l| l.split_whitespace().next().filter(|m| m.starts_with("mps/")))
        .unwrap()
        .to_string();
    let model = format!("runs/{model}");

    let s = ok(d, &["summarize"]);
    assert!(s.contains("bits") && d.join("runs/summary/costs.csv").exists());
    let s = ok(d, &["pareto", "--objective", "sbp"]);
    assert!(s.contains("on the front"));
    assert!(d.join("runs/pareto/front.svg").exists());

    let s = ok(d, &["eval", "-c", "toy.json", "--model", &model]);
    assert!(s.contains("AAMI") && s.contains("note:"), "{s}");
    let s = ok(d, &["export", "--model", &model, "--out", "export"]);
    assert!(s.contains("footprint"));
    let s = ok(
        d,
        &[
            "run-int",
            "--model",
            "export",
            "--windows",
            "windows.json",
            "--out",
            "pred.csv",
        ],
    );
    assert!(s.contains("MAE"));
    let preds = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert!(preds.starts_with("subject,window,sbp_pred"));
    assert!(preds.lines().count() > 10);

    let s = ok(d, &["finetune", "-c", "toy.json", "--model", &model, "--out", "ft"]);
    assert!(s.contains("->"));
    let rows = std::fs::read_to_string(d.join("ft/finetune.csv")).unwrap();
    assert!(rows.lines().count() >= 2);

    // float models cannot be exported to the integer container
    let out = ppgnas(d, &["export", "--model", "runs/seed", "--out", "x"]);
    assert!(!out.status.success());
}

#[test]
fn bad_override_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ppgnas(tmp.path(), &["nas", "--set", "bogus=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
