use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mplnclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mplnclust")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_fit_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mplnclust(&["simulate", "--preset", "two-component", "--n", "40", "--seed", "3", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["counts.csv", "labels.csv", "spec.json"] {
        assert!(data.join(f).exists());
    }

    let fit_dir = dir.path().join("fit");
    let out = mplnclust(&[
        "fit",
        "--input",
        path(&data.join("counts.csv")),
        "--normalization",
        "none",
        "--g-min",
        "1",
        "--g-max",
        "2",
        "--init-runs",
        "1",
        "--iters",
        "200",
        "--max-em-iters",
        "4",
        "--seed",
        "5",
        "--dump-chains",
        "1",
        "--out",
        path(&fit_dir),
    ]);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 3, "exit {code}: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["factors.csv", "criteria.csv", "assignments_G1.csv", "assignments_G2.csv", "trace_G2.csv", "chains_G2.csv", "results.json"] {
        assert!(fit_dir.join(f).exists(), "missing {f}");
    }
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["fits"].as_array().unwrap().len(), 2);
    assert_eq!(doc["data"]["n_genes"], 40);

    let out = mplnclust(&["evaluate", "--truth", path(&data.join("labels.csv")), "--pred", path(&fit_dir.join("assignments_G2.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ari: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((-1.0..=1.0).contains(&ari));
}

#[test]
fn evaluate_identical_files_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "gene_id,label\ng1,1\ng2,1\ng3,2\ng4,3\n").unwrap();
    let out = mplnclust(&["evaluate", "--truth", path(&labels), "--pred", path(&labels)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1");
}

#[test]
fn normalize_writes_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.tsv");
    fs::write(&counts, "gene\ta\tb\tc\ng1\t10\t20\t5\ng2\t3\t6\t1\ng3\t7\t14\t4\n").unwrap();
    let out = mplnclust(&["normalize", "--input", path(&counts), "--delimiter", "tab", "--method", "libsize"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("a,"));
    let s: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!((s[1] / s[0] - 2.0).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mplnclust(&["fit"]).status.code(), Some(2));
    assert_eq!(mplnclust(&["simulate", "--out", "x"]).status.code(), Some(2));
    assert_eq!(mplnclust(&["normalize", "--input", "x", "--delimiter", "ab"]).status.code(), Some(2));
}

#[test]
fn fit_errors_write_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = mplnclust(&["fit", "--input", path(&dir.path().join("missing.csv")), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "error");

    let counts = dir.path().join("c.csv");
    fs::write(&counts, "gene,a,b\ng1,1,2\n").unwrap();
    let out = mplnclust(&["fit", "--input", path(&counts), "--g-min", "3", "--g-max", "2", "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
}
