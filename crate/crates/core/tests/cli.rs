use std::path::Path;
use std::process::{Command, Output};

fn bevcomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevcomm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn repo_path(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel).display().to_string()
}

#[test]
fn sweep_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "strategies = [\"no_fusion\", \"fast2comm\"]\nseeds = [0, 1]\nsigma_e = [0.0]\nbudgets = [512, \"inf\"]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = bevcomm(&[
        "sweep",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("8 rows"));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().next().unwrap().contains("runtime_ms"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = bevcomm(&[
        "sweep",
        &repo_path("../../configs/smoke.toml"),
        "--out",
        out.to_str().unwrap(),
        "--seed-override",
        "42",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let seeds: Vec<String> = r.records().map(|rec| rec.unwrap()[1].to_string()).collect();
    assert_eq!(seeds.len(), 3 * 2 * 2);
    assert!(seeds.iter().all(|s| s == "42"));
}

#[test]
fn sweep_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = bevcomm(&["sweep", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "strategies = [\"topk\"]\nseeds = [1]\nbogus = 3\n").unwrap();
    assert_eq!(bevcomm(&["sweep", bad.to_str().unwrap()]).status.code(), Some(1));

    // output path is an existing file, not a directory
    let file = dir.path().join("f");
    std::fs::write(&file, "x").unwrap();
    let o = bevcomm(&[
        "sweep",
        &repo_path("../../configs/smoke.toml"),
        "--out",
        file.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn conformance_verifies_and_detects_tampering() {
    let o = bevcomm(&["conformance", "--dir", &repo_path("tests/fixtures")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| l.starts_with("ok"))
            .count(),
        4
    );

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(bevcomm(&["conformance", "--dir", d, "--write"]).status.success());
    assert!(bevcomm(&["conformance", "--dir", d]).status.success());
    for name in [
        "empty_m.bin",
        "diagonal_m.bin",
        "block_g.bin",
        "extremes_g.bin",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(repo_path(&format!("tests/fixtures/{name}"))).unwrap(),
            "{name}"
        );
    }
    let p = dir.path().join("diagonal_m.bin");
    let mut b = std::fs::read(&p).unwrap();
    b[20] ^= 0x40;
    std::fs::write(&p, b).unwrap();
    let o = bevcomm(&["conformance", "--dir", d]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL diagonal_m.bin"));
}
