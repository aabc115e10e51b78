use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn knit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = knit(dir, args);
    assert!(
        out.status.success(),
        "knit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SIM: &str = r#"{"d": 12, "p": 3, "n": 60, "T": 80, "q": 2, "seed": 4, "mc_samples": 20000}"#;

#[test]
fn file_pipeline_matches_end_to_end_run() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), SIM).unwrap();
    ok(d, &["simulate", "--config", "sim.json", "--out", "cohort.bin"]);
    ok(d, &["cooccur", "--in", "cohort.bin", "--out", "summary.knc"]);
    ok(d, &["estimate", "--summary", "summary.knc", "--rank", "3", "--out", "pmi.bin"]);
    ok(d, &["infer", "--summary", "summary.knc", "--pmi", "pmi.bin", "--out", "staged.csv"]);
    ok(d, &["infer", "--summary", "summary.knc", "--rank", "3", "--out", "direct.csv"]);
    ok(d, &["infer", "--from-config", "sim.json", "--rank", "3", "--out", "e2e.csv"]);
    let e2e = std::fs::read(d.join("e2e.csv")).unwrap();
    assert!(e2e.starts_with(b"w,w_prime,pmi_tilde,variance,z,p_value,selected\n"));
    assert_eq!(std::fs::read(d.join("staged.csv")).unwrap(), e2e);
    assert_eq!(std::fs::read(d.join("direct.csv")).unwrap(), e2e);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("e2e.csv.json")).unwrap()).unwrap();
    assert_eq!(side["J"].as_u64().unwrap() + side["excluded"].as_array().unwrap().len() as u64, 66);
    assert_eq!(side["config"]["input"]["simulation"]["seed"], 4);
}

#[test]
fn seed_flag_overrides_config_and_threads_do_not_matter() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), SIM).unwrap();
    ok(d, &["--threads", "1", "simulate", "--config", "sim.json", "--out", "a.bin"]);
    let four = Command::new(env!("CARGO_BIN_EXE_knit"))
        .current_dir(d)
        .env("KNIT_THREADS", "4")
        .args(["simulate", "--config", "sim.json", "--out", "b.bin"])
        .status()
        .unwrap();
    assert!(four.success());
    ok(d, &["simulate", "--config", "sim.json", "--seed", "5", "--out", "c.bin"]);
    let a = std::fs::read(d.join("a.bin")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.bin")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.bin")).unwrap());
}

#[test]
fn variance_paths_and_csv_summaries() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), SIM).unwrap();
    ok(d, &["simulate", "--config", "sim.json", "--out", "cohort.bin"]);
    ok(d, &["cooccur", "--in", "cohort.bin", "--q", "2", "--format", "csv", "--patient-dir", "patients", "--out", "s.csv"]);
    assert_eq!(std::fs::read_dir(d.join("patients")).unwrap().count(), 60);
    ok(d, &["estimate", "--summary", "s.csv", "--rank", "3", "--out", "pmi.bin"]);
    std::fs::write(d.join("pairs.csv"), "w,w_prime\n0,1\n2,5\n").unwrap();
    ok(d, &["variance", "--pmi", "pmi.bin", "--summary", "s.csv", "--pairs", "pairs.csv", "--out", "null.csv"]);
    ok(d, &["variance", "--pmi", "pmi.bin", "--summary", "s.csv", "--patient-dir", "patients", "--out", "patient.csv"]);
    let null = std::fs::read_to_string(d.join("null.csv")).unwrap();
    assert_eq!(null.lines().count(), 3);
    assert!(null.starts_with("w,w_prime,pmi_tilde,variance,clamped"));
    assert_eq!(std::fs::read_to_string(d.join("patient.csv")).unwrap().lines().count(), 67);
}

#[test]
fn fwer_and_paper_literal_options_are_recorded() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), SIM).unwrap();
    ok(d, &["infer", "--from-config", "sim.json", "--rank", "3", "--fwer", "0.1", "--paper-literal-p", "--out", "e.csv"]);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("e.csv.json")).unwrap()).unwrap();
    assert_eq!(side["control"], "fwer");
    assert_eq!(side["sidedness"], "paper_literal");
    assert_eq!(side["alpha"], 0.1);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.knc"), b"NOTKNIT\0\x01\0\0\0").unwrap();
    let out = knit(d, &["estimate", "--summary", "junk.knc", "--rank", "2", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let out = knit(d, &["estimate", "--summary", "missing.knc", "--rank", "2", "--out", "x"]);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(d.join("bad.json"), r#"{"d": 5, "p": 9, "n": 3, "T": 20, "q": 2, "seed": 1}"#).unwrap();
    let out = knit(d, &["simulate", "--config", "bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = knit(d, &["estimate", "--summary", "missing.knc", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reruns_are_byte_identical() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{
        "study": "type_i",
        "grid": {"n": [20, 40], "T": [30], "d": [6], "p": 1, "q": 2},
        "replicates": 1,
        "seed": 9,
        "out_dir": "ignored"
    }"#;
    std::fs::write(d.join("spec.json"), spec).unwrap();
    for out in ["a", "b"] {
        ok(d, &["bench", "--study", "type-i", "--config", "spec.json", "--out-dir", out]);
    }
    for f in ["type_i.csv", "type_i_replicates.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 9);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 1);

    let out = knit(d, &["bench", "--study", "power", "--config", "spec.json", "--out-dir", "c"]);
    assert_eq!(out.status.code(), Some(2));
}
