use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn eibench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eibench")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small labelled model population written by `eibench synth`.
fn population(dir: &Path) -> PathBuf {
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"num_models": 8, "num_samples": 300, "num_classes": 5, "accuracy_range": [0.55, 0.9],
            "invariance_link": {"slope": 6.0, "intercept": -2.5}, "noise_sd": 0.1, "seed": 3,
            "group_tags": ["cnn", "vit"]}"#,
    )
    .unwrap();
    let out = dir.join("pop");
    let o = eibench(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

const ORIG_CSV: &str = "3,3\n0.7,0.2,0.1,0\n0.1,0.8,0.1,1\n0.3,0.3,0.4,1\n";
const TRANS_CSV: &str = "3,3\n0.6,0.3,0.1,0\n0.2,0.2,0.6,1\n0.2,0.3,0.5,1\n";

fn csv_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let (o, t) = (dir.join("orig.csv"), dir.join("trans_rot90.csv"));
    fs::write(&o, ORIG_CSV).unwrap();
    fs::write(&t, TRANS_CSV).unwrap();
    (o, t)
}

#[test]
fn version_names_format() {
    let o = eibench(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("EIPRED1 format_version 1"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = eibench(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_flag_values_are_usage_errors() {
    assert_eq!(eibench(&["measure", "--orig", "a", "--trans", "b", "--kind", "nope"]).status.code(), Some(3));
    assert_eq!(eibench(&["--threads", "0", "validate", "x.pred"]).status.code(), Some(3));
    assert_eq!(eibench(&["transform", "--input", "a", "--output", "b", "--tag", "rot45"]).status.code(), Some(3));
}

#[test]
fn missing_file_exits_2_naming_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent.pred");
    let o = eibench(&["measure", "--orig", p(&missing), "--trans", p(&missing), "--kind", "ei"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.pred"));
    assert!(o.stdout.is_empty());
}

#[test]
fn measure_on_csv_fixture() {
    let tmp = TempDir::new().unwrap();
    let (o, t) = csv_pair(tmp.path());
    let out = eibench(&["measure", "--orig", p(&o), "--trans", p(&t), "--kind", "ei"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    // rows agree on classes 0 and 2 only
    let expected = ((0.7f64 * 0.6).sqrt() + (0.4f64 * 0.5).sqrt()) / 3.0;
    assert!((v["score"].as_f64().unwrap() - expected).abs() < 1e-6);
    assert_eq!(v["transform"], "rot90");
    assert_eq!(v["n"], 3);
    assert!((v["accuracy"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    let csv = eibench(&["--format", "csv", "measure", "--orig", p(&o), "--trans", p(&t), "--kind", "acc_diff"]);
    let text = stdout(&csv);
    assert!(text.starts_with("model_id,dataset_id,transform,measure,score,accuracy,n\n"));
    assert!(text.contains(",acc_diff,"));
}

#[test]
fn measure_on_pred_pair() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let preds = pop.join("preds");
    let o = eibench(&[
        "measure",
        "--orig",
        p(&preds.join("model_000__synthetic__identity.pred")),
        "--trans",
        p(&preds.join("model_000__synthetic__rot90.pred")),
        "--kind",
        "ei",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["model_id"], "model_000");
    let score = v["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
}

#[test]
fn mismatched_pair_exits_1() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let preds = pop.join("preds");
    let o = eibench(&[
        "measure",
        "--orig",
        p(&preds.join("model_000__synthetic__identity.pred")),
        "--trans",
        p(&preds.join("model_001__synthetic__rot90.pred")),
        "--kind",
        "js",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model_id"));
}

#[test]
fn rotation_average_needs_three_rotations_in_order() {
    let tmp = TempDir::new().unwrap();
    let (o, t) = csv_pair(tmp.path());
    let r180 = tmp.path().join("b.csv");
    let r270 = tmp.path().join("c.csv");
    fs::copy(&t, &r180).unwrap();
    fs::copy(&t, &r270).unwrap();
    let trans = format!("{},{},{}", p(&t), p(&r180), p(&r270));
    let out = eibench(&["measure", "--orig", p(&o), "--trans", &trans, "--kind", "ei"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["transform"], "rotation_avg");

    let two = format!("{},{}", p(&t), p(&r180));
    assert_eq!(eibench(&["measure", "--orig", p(&o), "--trans", &two, "--kind", "ei"]).status.code(), Some(3));
}

#[test]
fn validate_reports_violations() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let good = pop.join("preds/model_000__synthetic__identity.pred");
    let ok = eibench(&["validate", p(&good)]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(json(&ok)[0]["valid"], true);

    // break one probability while keeping the layout intact
    let mut bytes = fs::read(&good).unwrap();
    let n = bytes.len();
    let labels = 300 * 4;
    let offset = n - labels - 4;
    bytes[offset..offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let bad = tmp.path().join("bad.pred");
    fs::write(&bad, &bytes).unwrap();
    let o = eibench(&["validate", p(&good), p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let v = json(&o);
    assert_eq!(v[1]["valid"], false);
    assert_eq!(v[1]["violations"][0]["kind"], "non_finite");
    assert!(stderr(&o).contains("bad.pred"));

    let junk = tmp.path().join("junk.pred");
    fs::write(&junk, b"not a dump").unwrap();
    assert_eq!(eibench(&["validate", p(&junk)]).status.code(), Some(2));
}

#[test]
fn correlate_writes_report_and_points() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let report = tmp.path().join("report.json");
    let o = eibench(&[
        "correlate",
        "--records",
        p(&pop.join("records")),
        "--dataset",
        "synthetic",
        "--measure",
        "ei",
        "--group-by",
        "tag",
        "--seed",
        "4",
        "--resamples",
        "200",
        "--out",
        p(&report),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["axis"], "model_centric");
    assert_eq!(v["points"].as_array().unwrap().len(), 8);
    assert_eq!(v["groups"].as_array().unwrap().len(), 2);
    assert!(v["stats"]["pearson_r"].as_f64().unwrap() > 0.5);
    assert_eq!(fs::read(&report).unwrap(), o.stdout);
    let points = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(points.lines().count(), 9);
}

#[test]
fn correlate_needs_a_subject() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let o = eibench(&["correlate", "--records", p(&pop.join("records")), "--measure", "ei"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn too_few_models_exits_1() {
    let tmp = TempDir::new().unwrap();
    let records = tmp.path().join("records");
    fs::create_dir(&records).unwrap();
    for (i, acc) in [0.6, 0.7].iter().enumerate() {
        let rec = serde_json::json!({
            "model_id": format!("m{i}"),
            "dataset_id": "d",
            "transform": "rot90",
            "measure": "ei",
            "score": 0.5 + i as f64 * 0.1,
            "accuracy": acc,
            "n": 100
        });
        fs::write(records.join(format!("m{i}.json")), rec.to_string()).unwrap();
    }
    let o = eibench(&["correlate", "--records", p(&records), "--dataset", "d", "--measure", "ei"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least"));
}

#[test]
fn rank_orders_by_invariance() {
    let tmp = TempDir::new().unwrap();
    let pop = population(tmp.path());
    let o = eibench(&["rank", "--records", p(&pop.join("records")), "--dataset", "synthetic", "--measure", "js"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    let scores: Vec<f64> = v["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["score"].as_f64().unwrap())
        .collect();
    assert_eq!(scores.len(), 8);
    assert!(scores.windows(2).all(|w| w[0] <= w[1]), "js ranks smallest first: {scores:?}");
}

#[test]
fn predict_held_out_sets() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("suite.json");
    fs::write(
        &cfg,
        r#"{"num_models": 8, "num_samples": 2000, "num_classes": 10, "accuracy_range": [0.55, 0.9],
            "invariance_link": {"slope": 6.0, "intercept": -2.5}, "noise_sd": 0.05, "seed": 9,
            "axis": "test_sets", "model_id": "resnet"}"#,
    )
    .unwrap();
    let out = tmp.path().join("suite");
    assert_eq!(eibench(&["synth", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(0));
    let o = eibench(&[
        "predict",
        "--records",
        p(&out.join("records")),
        "--train",
        "set_000,set_001,set_002,set_003,set_004,set_005",
        "--target",
        "set_006,set_007",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    let preds = v[0]["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 2);
    for pr in preds {
        let a = pr["predicted_accuracy"].as_f64().unwrap();
        let (lo, hi) = (pr["interval"][0].as_f64().unwrap(), pr["interval"][1].as_f64().unwrap());
        assert!(lo <= a && a <= hi);
    }

    let missing = eibench(&[
        "predict",
        "--records",
        p(&out.join("records")),
        "--train",
        "set_000,set_001,set_002",
        "--target",
        "set_099",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn transform_writes_pngs() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir_all(input.join("sub")).unwrap();
    // 2x3 RGB PNG built by hand through the core crate's image round trip
    let img = eibench_core::imgxform::ImageTensor::new(2, 3, 3, (0..18).collect()).unwrap();
    img.to_dynamic().save(input.join("sub/a.png")).unwrap();
    fs::write(input.join("broken.png"), b"not an image").unwrap();
    let output = tmp.path().join("out");
    let o = eibench(&["transform", "--input", p(&input), "--output", p(&output), "--tag", "rot90"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["written"], 1);
    assert_eq!(v["skipped"].as_array().unwrap().len(), 1);
    assert!(output.join("sub/a.png").exists());

    let strict = eibench(&[
        "transform",
        "--input",
        p(&input),
        "--output",
        p(&output),
        "--tag",
        "rot90",
        "--fail-fast",
    ]);
    assert_ne!(strict.status.code(), Some(0));
}

#[test]
fn synth_rejects_bad_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_models": 0}"#).unwrap();
    let o = eibench(&["synth", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}
