use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treecss"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn e2e_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["e2e", "--n", "100"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn e2e_records_feed_the_report() {
    let dir = tempfile::tempdir().unwrap();
    for config in ["StarALL", "TreeCSS"] {
        let line = ok(
            dir.path(),
            &[
                "e2e",
                "--n",
                "600",
                "--seed",
                "3",
                "--config",
                config,
                "--max-epochs",
                "5",
                "--out",
                "runs.jsonl",
            ],
        );
        assert!(line.starts_with(config), "{line}");
    }
    let records = std::fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
    let table = ok(dir.path(), &["report", "runs.jsonl", "--json", "report.json"]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("speedup") && table.contains("1.00x"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn coreset_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(
        dir.path(),
        &[
            "coreset", "--n", "800", "--seed", "2", "--out", "cs.csv", "--report", "cs.json",
        ],
    );
    assert!(summary.contains("compression_ratio"));
    let csv = std::fs::read_to_string(dir.path().join("cs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample_id,global_weight"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cs.json")).unwrap()).unwrap();
    assert_eq!(
        report["coreset_size"].as_u64().unwrap() as usize,
        csv.lines().count() - 1
    );

    ok(
        dir.path(),
        &[
            "train",
            "--n",
            "800",
            "--seed",
            "2",
            "--coreset",
            "cs.csv",
            "--max-epochs",
            "5",
            "--report",
            "tr.json",
            "--params",
            "p.json",
        ],
    );
    let tr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tr.json")).unwrap()).unwrap();
    assert_eq!(tr["samples"], report["coreset_size"]);
    assert!(tr["test_metric"]["accuracy"].as_f64().unwrap() > 0.8);
    let params: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(params["entries"][0]["name"], "bottom1.w");

    let bad = run(dir.path(), &["train", "--n", "800", "--coreset", "missing.csv"]);
    assert!(!bad.status.success());
}

#[test]
fn psi_bench_writes_one_record_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(
        dir.path(),
        &[
            "psi-bench",
            "--clients",
            "3",
            "--set-size",
            "100",
            "--protocol",
            "oprf",
            "--out",
            "psi.jsonl",
        ],
    );
    assert_eq!(table.lines().count(), 7);
    let records = std::fs::read_to_string(dir.path().join("psi.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);
}
