use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn oncotwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oncotwin"))
        .current_dir(dir)
        .env_remove("ONCOTWIN_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// A temp dir holding a store populated with the 21 fixture twins.
fn fixture_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let twins = fixture("twins.jsonl");
    let out = oncotwin(dir.path(), &["store", "put", twins.to_str().unwrap(), "--store", "st"]);
    assert_eq!(json(&out).as_array().unwrap().len(), 21);
    dir
}

#[test]
fn sample_size_prints_367() {
    let dir = tempfile::tempdir().unwrap();
    let out = oncotwin(
        dir.path(),
        &["sample-size", "--Z", "1.96", "--N", "7956", "--e", "0.05", "--P", "0.5"],
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "367");
    let out = oncotwin(
        dir.path(),
        &[
            "sample-size",
            "--Z",
            "1.96",
            "--N",
            "7956",
            "--e",
            "0.05",
            "--P",
            "0.5",
            "--format",
            "table",
        ],
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "367");
}

#[test]
fn summarize_literature_from_store() {
    let dir = fixture_store();
    let s = json(&oncotwin(
        dir.path(),
        &["summarize", "--source", "literature", "--store", "st"],
    ));
    assert_eq!(s["n"], 14);
    assert_eq!(s["median_pfs"].as_f64(), Some(4.0));
    assert_eq!(s["median_os"].as_f64(), Some(9.9));
    let text =
        String::from_utf8(oncotwin(dir.path(), &["summarize", "--source", "literature", "--store", "st"]).stdout)
            .unwrap();
    assert!(text.contains("\"median_pfs\": 4.0") && text.contains("\"median_os\": 9.9"));
}

#[test]
fn cloud_extraction_of_ehr_is_refused_up_front() {
    let dir = tempfile::tempdir().unwrap();
    // No manifest, no endpoint: the refusal must come before either is needed.
    let out = oncotwin(dir.path(), &["extract", "--backend", "cloud", "--origin", "ehr"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("privacy tier is public_only"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_2_and_data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oncotwin(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        oncotwin(
            dir.path(),
            &["sample-size", "--Z", "x", "--N", "1", "--e", "0.05", "--P", "0.5"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        oncotwin(dir.path(), &["extract", "--backend", "gpu", "--origin", "ehr"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        oncotwin(dir.path(), &["summarize", "--format", "yaml"]).status.code(),
        Some(2)
    );
    assert_eq!(
        oncotwin(
            dir.path(),
            &["sample-size", "--Z", "1.96", "--N", "0", "--e", "0.05", "--P", "0.5"]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        oncotwin(dir.path(), &["validate", "missing.jsonl"]).status.code(),
        Some(1)
    );
    let store = fixture_store();
    assert_eq!(
        oncotwin(store.path(), &["store", "get", "nope", "--store", "st"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        oncotwin(store.path(), &["store", "query", "shoe_size > 3", "--store", "st"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn mock_extraction_is_reproducible_with_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture("mock_corpus/manifest.jsonl");
    let replies = fixture("mock_corpus/replies");
    let args = [
        "extract",
        "--backend",
        "mock",
        "--origin",
        "ehr",
        "--manifest",
        manifest.to_str().unwrap(),
        "--replies",
        replies.to_str().unwrap(),
        "--seed",
        "7",
    ];
    let a = oncotwin(dir.path(), &args);
    let b = oncotwin(dir.path(), &args);
    assert_eq!(a.stdout, b.stdout);
    let report = &json(&a)["report"];
    assert_eq!(
        (report["extracted"].as_u64(), report["quarantined"].as_u64()),
        (Some(9), Some(1))
    );
}

#[test]
fn extracted_twins_can_be_saved_and_queried() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture("mock_corpus/manifest.jsonl");
    let replies = fixture("mock_corpus/replies");
    let out = oncotwin(
        dir.path(),
        &[
            "extract",
            "--backend",
            "mock",
            "--origin",
            "ehr",
            "--manifest",
            manifest.to_str().unwrap(),
            "--replies",
            replies.to_str().unwrap(),
            "--out",
            "twins.jsonl",
            "--save",
            "--store",
            "st",
        ],
    );
    json(&out);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("twins.jsonl"))
            .unwrap()
            .lines()
            .count(),
        9
    );
    let all = json(&oncotwin(dir.path(), &["store", "query", "--store", "st"]));
    assert_eq!(all.as_array().unwrap().len(), 9);
    let v = json(&oncotwin(dir.path(), &["validate", "twins.jsonl"]));
    assert!(v.as_array().unwrap().iter().all(|r| r["admissible"] == true));
}

#[test]
fn match_and_whatif_over_fixture_store() {
    let dir = fixture_store();
    let candidates = fixture("institutional_candidates.jsonl");
    let funnel = json(&oncotwin(
        dir.path(),
        &["match", "--input", candidates.to_str().unwrap()],
    ));
    let stages = funnel.as_array().unwrap();
    assert_eq!(stages.first().unwrap()["ids"].as_array().unwrap().len(), 9);
    let last: Vec<&str> = stages.last().unwrap()["ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(
        last,
        ["case-1", "case-2", "case-3", "case-4", "case-5", "case-6", "case-7"]
    );

    let w = json(&oncotwin(dir.path(), &["whatif", "case-1", "--store", "st"]));
    assert_eq!(w["analogs"].as_array().unwrap().len(), 6);
    let w = json(&oncotwin(
        dir.path(),
        &["whatif", "case-1", "--store", "st", "--overrides", r#"{"mmr":"dMMR"}"#],
    ));
    assert!(w["analogs"].as_array().unwrap().is_empty());
    let bad = oncotwin(
        dir.path(),
        &["whatif", "case-1", "--store", "st", "--overrides", r#"{"age":50}"#],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn recommend_and_letter_are_deterministic() {
    let dir = fixture_store();
    let base = [
        "--store",
        "st",
        "--region",
        "Bavaria",
        "--allow-off-label",
        "--as-of",
        "2024-06-01",
    ];
    let recs = json(&oncotwin(dir.path(), &[&["recommend", "case-1"][..], &base].concat()));
    assert_eq!(recs.as_array().unwrap().len(), 11);
    let letter_args = [
        &["letter", "case-1"][..],
        &base,
        &["--date", "2024-06-01", "--format", "table"],
    ]
    .concat();
    let a = oncotwin(dir.path(), &letter_args);
    let b = oncotwin(dir.path(), &letter_args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("---\ntwin: case-1\ndate: 2024-06-01\n"));
    assert!(text.contains("PD-L1: CPS 41"));
}

#[test]
fn evaluate_reproduces_totals_and_flags_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (ehr, lit, reported) = (
        fixture("adjudication_ehr.jsonl"),
        fixture("adjudication_literature.jsonl"),
        fixture("table1_reported.csv"),
    );
    let r = json(&oncotwin(
        dir.path(),
        &[
            "evaluate",
            ehr.to_str().unwrap(),
            lit.to_str().unwrap(),
            "--reported",
            reported.to_str().unwrap(),
        ],
    ));
    let total = r["table"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|row| row["source"] == "Literature" && row["attribute"] == "TOTAL")
        .unwrap();
    assert_eq!(total["tally"]["tp"], 225);
    assert!(r["mismatches"].as_array().unwrap().is_empty());
    let flagged: Vec<&str> = r["lint"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["attribute"].as_str().unwrap())
        .collect();
    assert_eq!(
        flagged,
        ["Age", "Previous treatments", "Study treatment response", "TOTAL"]
    );
}

#[test]
fn ingest_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("note.txt"), "Pathology report.\nCPS 41, pMMR.\n").unwrap();
    let added = json(&oncotwin(
        dir.path(),
        &["ingest", "note.txt", "--origin", "ehr", "--patient", "p1"],
    ));
    assert_eq!(added.as_array().unwrap().len(), 1);
    let again = json(&oncotwin(
        dir.path(),
        &["ingest", "note.txt", "--origin", "ehr", "--patient", "p1"],
    ));
    assert!(again.as_array().unwrap().is_empty());
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert!(manifest.contains("\"patient_hint\":\"p1\""));
}

#[test]
fn every_subcommand_accepts_both_formats() {
    let dir = fixture_store();
    let twins = fixture("twins.jsonl");
    let t = twins.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["validate", t],
        vec!["store", "get", "case-1"],
        vec!["store", "query", "cps >= 40"],
        vec!["match"],
        vec!["summarize"],
        vec!["recommend", "case-1"],
        vec!["kb"],
        vec!["sample-size", "--Z", "1.96", "--N", "100", "--e", "0.05", "--P", "0.5"],
    ];
    for case in cases {
        for format in ["json", "table"] {
            let args = [&case[..], &["--store", "st", "--format", format]].concat();
            let out = oncotwin(dir.path(), &args);
            assert!(
                out.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            assert!(!out.stdout.is_empty(), "{args:?}");
        }
    }
}
