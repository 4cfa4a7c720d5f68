use std::path::Path;
use std::process::{Command, Output};

fn rem(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rem"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = rem(out, args);
    assert!(
        o.status.success(),
        "rem {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn small_synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "--seed", "5", "synth", "--n-measurements", "200", "--width", "400", "--height", "300", "--buildings", "10",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn help_lists_every_command() {
    let o = Command::new(env!("CARGO_BIN_EXE_rem")).arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["ingest", "fit-eirp", "synth", "extract", "train", "predict", "rem", "evaluate", "search"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn full_small_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    ok(d, &["ingest", "--scenario", &p(d, "scenario.json"), "--terrain", &p(d, "terrain.asc")]);
    ok(d, &["fit-eirp", "--bundle", &p(d, "bundle.json"), "--measurements", &p(d, "measurements.csv")]);
    let fitted = p(d, "fitted_bundle.json");
    let meas = p(d, "measurements.csv");
    ok(d, &["extract", "--bundle", &fitted, "--measurements", &meas]);
    let train = ok(d, &["--seed", "1", "train", "--dataset", &p(d, "dataset.jsonl"), "--epochs", "1"]);
    assert!(train.contains("held-out RMSE"), "{train}");
    let ck = p(d, "checkpoint.json");
    ok(d, &["predict", "--bundle", &fitted, "--measurements", &meas, "--predictor", "dragon", "--checkpoint", &ck]);
    let eval = ok(
        d,
        &[
            "evaluate", "--bundle", &fitted, "--measurements", &meas, "--checkpoint", &ck, "--predictions",
            &p(d, "predictions_dragon.csv"), "--split", &p(d, "split.json"), "--subset", "test",
        ],
    );
    assert!(eval.contains("uma-b") && eval.contains("dragon"), "{eval}");
    ok(d, &["rem", "--bundle", &fitted, "--predictor", "dragon", "--checkpoint", &ck, "--resolution", "50"]);
    for f in [
        "synth.manifest.json", "ingest.manifest.json", "fit-eirp.manifest.json", "extract.manifest.json",
        "train.manifest.json", "predict.manifest.json", "evaluate.manifest.json", "rem.manifest.json",
        "history.json", "evaluation.csv", "ecdf_dragon.csv", "rem_cell0.pgm", "best_server.csv",
    ] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["train"]["seed"], 1);
}

#[test]
fn malformed_scenario_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    std::fs::write(d.join("bad.json"), "{\n  \"buildings\": [\n").unwrap();
    let o = rem(d, &["ingest", "--scenario", &p(d, "bad.json"), "--terrain", &p(d, "terrain.asc")]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.json"), "{err}");
}

#[test]
fn missing_terrain_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    let o = rem(d, &["ingest", "--scenario", &p(d, "scenario.json"), "--terrain", &p(d, "nope.asc")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.asc"));
}

#[test]
fn unknown_config_key_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("cfg.json"), r#"{"seed": 1, "learning_rat": 0.1}"#).unwrap();
    let o = rem(d, &["--config", &p(d, "cfg.json"), "synth", "--n-measurements", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_eirp_is_idempotent() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    let meas = p(d, "measurements.csv");
    let first = ok(d, &["fit-eirp", "--bundle", &p(d, "bundle.json"), "--measurements", &meas]);
    let once = std::fs::read(d.join("fitted_bundle.json")).unwrap();
    std::fs::rename(d.join("fitted_bundle.json"), d.join("once.json")).unwrap();
    let second = ok(d, &["fit-eirp", "--bundle", &p(d, "once.json"), "--measurements", &meas]);
    assert_eq!(first, second);
    assert_eq!(once, std::fs::read(d.join("fitted_bundle.json")).unwrap());
}

#[test]
fn truth_against_itself_scores_zero() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    ok(d, &["fit-eirp", "--bundle", &p(d, "bundle.json"), "--measurements", &p(d, "measurements.csv")]);
    let out = ok(
        d,
        &[
            "evaluate", "--bundle", &p(d, "fitted_bundle.json"), "--measurements", &p(d, "truth.csv"), "--predictors", "uma-b",
            "--predictions", &p(d, "truth.csv"),
        ],
    );
    let row = out.lines().find(|l| l.starts_with("truth")).expect("truth row");
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[2..], ["0.00", "0.00", "0.00"], "{row}");
}

#[test]
fn rem_grid_has_expected_rows() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--n-measurements", "50", "--width", "1000", "--height", "500", "--buildings", "5"]);
    ok(d, &["fit-eirp", "--bundle", &p(d, "bundle.json"), "--measurements", &p(d, "measurements.csv")]);
    ok(d, &["rem", "--bundle", &p(d, "fitted_bundle.json"), "--resolution", "50"]);
    let text = std::fs::read_to_string(d.join("rem.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 200);
    let pgm = std::fs::read(d.join("rem_cell0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    assert!(pgm.len() > 200);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_synth(a.path(), &[]);
    small_synth(b.path(), &[]);
    for f in ["scenario.json", "terrain.asc", "measurements.csv", "truth.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_noise_measurements_equal_truth() {
    let t = tempfile::tempdir().unwrap();
    small_synth(t.path(), &["--sigma", "0"]);
    assert_eq!(
        std::fs::read(t.path().join("measurements.csv")).unwrap(),
        std::fs::read(t.path().join("truth.csv")).unwrap()
    );
}

#[test]
fn dragon_without_checkpoint_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    let o = rem(d, &["rem", "--bundle", &p(d, "bundle.json"), "--predictor", "dragon"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn search_writes_best_config() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, &[]);
    ok(d, &["fit-eirp", "--bundle", &p(d, "bundle.json"), "--measurements", &p(d, "measurements.csv")]);
    ok(d, &["extract", "--bundle", &p(d, "fitted_bundle.json"), "--measurements", &p(d, "measurements.csv")]);
    ok(d, &["search", "--dataset", &p(d, "dataset.jsonl"), "--trials", "2", "--epochs", "1"]);
    let csv = std::fs::read_to_string(d.join("search.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let best = std::fs::read_to_string(d.join("best_config.json")).unwrap();
    let o = rem(d, &["--config", &p(d, "best_config.json"), "synth", "--n-measurements", "10"]);
    assert!(o.status.success(), "{best}");
}
