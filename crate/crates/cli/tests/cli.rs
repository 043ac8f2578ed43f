//! End-to-end checks of the `pfl` binary: exit codes and reproducible output.

use std::path::{Path, PathBuf};
use std::process::Command;

fn pfl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pfl"));
    c.env_remove("PFL_OUTPUT_DIR");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.scenario"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn validate_accepts_shipped_and_rejects_broken() {
    let ok = pfl()
        .arg("validate")
        .arg(scenario("fig1"))
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );

    let bad = pfl()
        .args(["validate"])
        .arg(scenario("fig1"))
        .args(["--override", "n_paths=0"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let missing = pfl()
        .args(["validate", "no/such/file.scenario"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn equal_overrides_give_byte_identical_profiles() {
    let tmp = tempfile::tempdir().unwrap();
    for k in 0..2 {
        let st = pfl()
            .arg("run")
            .arg(scenario("usd_irs_collat"))
            .args(["--override", "n_paths=1000", "seed=7", "--output-dir"])
            .arg(tmp.path().join(k.to_string()))
            .output()
            .map(|o| o.status)
            .unwrap();
        assert_eq!(st.code(), Some(0));
    }
    let a = read_tree(&tmp.path().join("0/profiles"));
    let b = read_tree(&tmp.path().join("1/profiles"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn breach_exits_with_three_and_check_limits_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let limits = tmp.path().join("tight.csv");
    std::fs::write(
        &limits,
        "counterparty,netting_set,metric,q,limit\nACME,ACME-USD-IRS,PFE,0.95,1000\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    let run = pfl()
        .arg("run")
        .arg(scenario("usd_irs_uncollat"))
        .arg("--override")
        .arg("n_paths=300")
        .arg(format!("limits_file={}", limits.display()))
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        run.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("BREACH"));

    let report = tmp.path().join("breaches.json");
    let check = pfl()
        .arg("check-limits")
        .arg("--profiles")
        .arg(out.join("profiles"))
        .arg("--limits")
        .arg(&limits)
        .arg("--output")
        .arg(&report)
        .output()
        .map(|o| o.status)
        .unwrap();
    assert_eq!(check.code(), Some(3));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json[0]["breached"], true);

    let generous = pfl()
        .arg("check-limits")
        .arg("--profiles")
        .arg(out.join("profiles"))
        .arg("--limits")
        .arg(scenario("limits").with_extension("csv"))
        .output()
        .unwrap();
    assert_eq!(generous.status.code(), Some(0));
}

#[test]
fn plot_data_writes_overlay_and_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let st = pfl()
        .args(["--threads", "2", "plot-data"])
        .arg(scenario("fig1"))
        .args(["--override", "n_paths=400", "--output-dir"])
        .arg(tmp.path())
        .output()
        .map(|o| o.status)
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let names: Vec<String> = read_tree(&tmp.path().join("plot"))
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert!(names.iter().any(|n| n.starts_with("overlay_q")));
    assert!(names.iter().any(|n| n.starts_with("histogram_")));
    assert!(names.contains(&"plot_manifest.json".to_string()));
}

#[test]
fn output_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let st = pfl()
        .env("PFL_OUTPUT_DIR", tmp.path())
        .arg("run")
        .arg(scenario("fig2"))
        .args(["--override", "n_paths=200"])
        .output()
        .map(|o| o.status)
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(tmp.path().join("run_manifest.json").exists());
}
