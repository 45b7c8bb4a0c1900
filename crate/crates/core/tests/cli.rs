use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

fn wpflow(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_wpflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("WPFLOW_OUT")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let listed: Vec<(String, String)> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            (
                f["path"].as_str().unwrap().to_string(),
                f["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut names: Vec<String> = listed.iter().map(|l| l.0.clone()).collect();
    names.sort();
    assert_eq!(names, on_disk);
    for (path, sha) in listed {
        assert_eq!(
            hex::encode(Sha256::digest(fs::read(dir.join(&path)).unwrap())),
            sha,
            "{path}"
        );
    }
}

#[test]
fn validate_is_deterministic_across_workers() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        wpflow(
            &["validate", "--seed", "42", "--out", "w1", "--workers", "1"],
            tmp.path()
        ),
        0
    );
    assert_eq!(
        wpflow(
            &["validate", "--seed", "42", "--out", "w3", "--workers", "3"],
            tmp.path()
        ),
        0
    );
    let (a, b) = (csvs(&tmp.path().join("w1")), csvs(&tmp.path().join("w3")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_manifest_complete(&tmp.path().join("w1"));
    assert_eq!(manifest(&tmp.path().join("w1"))["status"], "passed");
}

#[test]
fn gamma_bound_is_deterministic_and_reports_gamma() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "g.toml",
        "seed = 7\n[params]\nk = 1\nn = 20000\nn_norm = 200\nn_certificate = 2000\nn_calibration = 50\n",
    );
    assert_eq!(
        wpflow(
            &["gamma-bound", "--config", &cfg, "--out", "g1", "--workers", "1"],
            tmp.path()
        ),
        0
    );
    assert_eq!(
        wpflow(
            &["gamma-bound", "--config", &cfg, "--out", "g4", "--workers", "4"],
            tmp.path()
        ),
        0
    );
    assert_eq!(csvs(&tmp.path().join("g1")), csvs(&tmp.path().join("g4")));
    let m = manifest(&tmp.path().join("g1"));
    let g = m["summary"]["gamma_max"].as_f64().unwrap();
    assert!((g - 10.0).abs() < 0.5, "{g}");
    assert_manifest_complete(&tmp.path().join("g4"));
    let header = fs::read_to_string(tmp.path().join("g1/gamma-bound-s7-gamma.csv")).unwrap();
    assert!(header.starts_with("eps,m,n_k,t,implied_gamma\n"));
}

#[test]
fn plot_data_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "v.toml", "seed = 3\n[params]\nn = 20000\n");
    assert_eq!(wpflow(&["volumes", "--config", &cfg, "--out", "v"], tmp.path()), 0);
    for name in ["e_rho", "v_eps"] {
        let text = fs::read_to_string(tmp.path().join(format!("v/volumes-s3-{name}.csv"))).unwrap();
        assert!(text.starts_with("param,estimate,stderr,fit_value\n"), "{name}");
        assert_eq!(text.lines().count(), 7);
    }
    let cfg = write_config(
        tmp.path(),
        "e.toml",
        "seed = 3\n[params]\nn_per_half = 30\n[metric]\neta = 0.3\n",
    );
    assert_eq!(wpflow(&["escape", "--config", &cfg, "--out", "e"], tmp.path()), 0);
    let text = fs::read_to_string(tmp.path().join("e/escape-s3-escape-scaling.csv")).unwrap();
    assert!(text.starts_with("eps,min_t,median_t,fit\n"));
}

#[test]
fn trajectory_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.toml",
        "[params]\nhorizon = 2.0\ndt = 0.5\ndirection = [0.0, 0.0, 1.0, 0.0]\n",
    );
    assert_eq!(
        wpflow(&["geodesic", "--config", &cfg, "--seed", "1", "--out", "t"], tmp.path()),
        0
    );
    let text = fs::read_to_string(tmp.path().join("t/geodesic-s1-trajectory.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x,tau,y1,y2,vx,vtau,vy1,vy2,f,r");
    assert_eq!(lines.count(), 5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // no seed
    assert_eq!(wpflow(&["drift", "--out", "x"], d), 2);
    // unknown key
    let bad = write_config(d, "bad.toml", "seed = 1\n[params]\nepsilon = [0.1]\n");
    assert_eq!(wpflow(&["escape", "--config", &bad], d), 2);
    // unknown subcommand
    assert_eq!(wpflow(&["mix", "--seed", "1"], d), 2);
    // precondition: 2 eps above the systole scale of U
    let pre = write_config(d, "pre.toml", "seed = 1\n[params]\neps = [1.5]\nc0 = 1.0\n");
    assert_eq!(wpflow(&["certificate", "--config", &pre, "--out", "pre"], d), 2);
    let m = manifest(&d.join("pre"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("systole"));
    // an understated C0 claims a window the flow violates
    let wrong = write_config(
        d,
        "wrong.toml",
        "seed = 5\n[params]\neps = [1.2]\nc0 = 0.001\nt = [2.0, 5.0]\nn = 5000\n",
    );
    assert_eq!(wpflow(&["correlation", "--config", &wrong, "--out", "wrong"], d), 1);
    assert_eq!(manifest(&d.join("wrong"))["status"], "assertion_failed");
}

#[test]
fn output_directory_override() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_wpflow"))
        .args(["geometry-report", "--seed", "1", "--out", "ignored"])
        .current_dir(tmp.path())
        .env("WPFLOW_OUT", "chosen")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(tmp.path().join("chosen/manifest.json").exists());
    assert!(!tmp.path().join("ignored").exists());
    assert_manifest_complete(&tmp.path().join("chosen"));
}
