use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_current-rdm");

const SMALL_GRIDS: &str = "
[grid]
counts = 24
sample_counts = 7
spectral_counts = 8
spectral_half_width = 4.5

[numerics]
tau_points = 20
factorization_pairs = 16

[probes]
measure_points = 2
";

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn report(out: &Path, run_dir: &str) -> Value {
    let text = std::fs::read_to_string(out.join(run_dir).join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn gaussian(n: f64, kappa: &str, extra: &str) -> String {
    format!("[density]\npreset = \"gaussian\"\nparams = {{ n = {n:?}, alpha = 1.0 }}\n\n[kappa]\n{kappa}\n{extra}")
}

#[test]
fn verify_passes_without_current() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "zero.toml",
        &gaussian(1.0, "preset = \"zero\"", SMALL_GRIDS),
    );
    let out = run(&["verify", "--no-timestamp"], &cfg, dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(dir.path(), "run-verify");
    assert_eq!(r["schema"], "current-rdm.report/1");
    assert_eq!(r["summary"]["failed"], 0);
    assert!(r["checks"].as_array().unwrap().len() > 40);
    assert!(r["timestamp"].is_null());
    for c in r["checks"].as_array().unwrap() {
        assert!(c["tolerance"].is_number(), "{c}");
    }
}

#[test]
fn invalid_config_exits_with_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "theta.toml",
            gaussian(1.0, "preset = \"zero\"", "[kernel]\ntheta = 1.5\n"),
            "kernel.theta",
        ),
        (
            "unknown.toml",
            gaussian(1.0, "preset = \"zero\"", "[kernel]\nwidth = 1.0\n"),
            "width",
        ),
        (
            "missing.toml",
            gaussian(1.0, "preset = \"rigid_rotation\"", ""),
            "kappa.omega",
        ),
    ];
    for (name, body, key) in cases {
        let cfg = write_config(dir.path(), name, &body);
        let out = run(&["construct"], &cfg, dir.path());
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{name}: {err}");
    }
    let out = run(&["construct"], &dir.path().join("absent.toml"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run-construct").exists());
}

#[test]
fn construct_reports_larger_threshold_for_spin_orbitals() {
    let dir = tempfile::tempdir().unwrap();
    let rot = "preset = \"rigid_rotation\"\nomega = [0.0, 0.0, 0.5]";
    let mut thresholds = Vec::new();
    for occ in [2, 1] {
        let out_dir = dir.path().join(format!("occ{occ}"));
        let cfg = write_config(
            dir.path(),
            &format!("occ{occ}.toml"),
            &gaussian(1.0, rot, &format!("[kernel]\nocc_max = {occ}\n")),
        );
        let out = run(&["construct", "--no-timestamp"], &cfg, &out_dir);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let r = report(&out_dir, "run-construct");
        let lm = r["values"]["lambda_min.2"].as_f64().unwrap();
        assert!(lm > 0.0);
        assert_eq!(r["values"]["occ_max"].as_f64(), Some(occ as f64));
        let csv = std::fs::read_to_string(out_dir.join("run-construct/kernel-D.csv")).unwrap();
        assert!(csv.starts_with("rx,ry,rz,sx,sy,sz,re,im\n"));
        thresholds.push(lm);
    }
    assert!(thresholds[1] > thresholds[0]);
}

#[test]
fn reruns_are_byte_identical_and_never_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "rot.toml",
        &gaussian(
            1.0,
            "preset = \"rigid_rotation\"\nomega = [0.0, 0.0, 1.0]",
            SMALL_GRIDS,
        ),
    );
    for _ in 0..2 {
        assert!(run(&["functionals", "--no-timestamp"], &cfg, dir.path())
            .status
            .success());
    }
    let a = std::fs::read(dir.path().join("run-functionals/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("run-functionals-1/report.json")).unwrap();
    assert_eq!(a, b);
    for f in ["density.csv", "current.csv", "tau-D.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("run-functionals").join(f)).unwrap(),
            std::fs::read(dir.path().join("run-functionals-1").join(f)).unwrap(),
        );
    }

    assert!(run(&["functionals"], &cfg, dir.path()).status.success());
    let r = report(dir.path(), "run-functionals-2");
    assert!(r["timestamp"].as_str().unwrap().starts_with("unix:"));
    assert_eq!(
        std::fs::read(dir.path().join("run-functionals/report.json")).unwrap(),
        a
    );
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let kappa = "preset = \"rigid_rotation\"\nomega = [0.0, 0.3, 0.5]";
    let mut reports = Vec::new();
    for workers in [1, 3] {
        let body = gaussian(
            1.0,
            kappa,
            &SMALL_GRIDS.replace(
                "[numerics]\n",
                &format!("[numerics]\nworkers = {workers}\n"),
            ),
        );
        let cfg = write_config(dir.path(), &format!("w{workers}.toml"), &body);
        let out_dir = dir.path().join(format!("w{workers}"));
        assert!(run(&["functionals", "--no-timestamp"], &cfg, &out_dir)
            .status
            .success());
        reports.push(report(&out_dir, "run-functionals"));
    }
    assert_eq!(reports[0]["values"], reports[1]["values"]);
    assert_eq!(reports[0]["checks"], reports[1]["checks"]);
}

#[test]
fn sub_threshold_width_breaks_the_occupation_bound() {
    let dir = tempfile::tempdir().unwrap();
    let grid = "[grid]\nspectral_counts = 8\nspectral_half_width = 4.5\n";
    let body = gaussian(
        4.0,
        "preset = \"zero\"",
        &format!("[kernel]\nq = [2.0]\nlambda_scale = 0.01\n\n{grid}"),
    );
    let cfg = write_config(dir.path(), "plain.toml", &body);
    let out = run(&["spectrum", "--no-timestamp"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("spectrum.D.occupation"), "{err}");

    let body = gaussian(
        4.0,
        "preset = \"zero\"",
        &format!(
            "[kernel]\nq = [2.0]\nlambda_scale = 0.01\nexpect_occupation_failure = true\n\n{grid}"
        ),
    );
    let cfg = write_config(dir.path(), "expected.toml", &body);
    let out = run(&["spectrum", "--no-timestamp"], &cfg, dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(dir.path(), "run-spectrum-1");
    let occ = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "spectrum.D.occupation")
        .unwrap();
    assert_eq!(occ["holds"], false);
    assert_eq!(occ["expect_failure"], true);
    assert!(r["values"]["spectrum.D.max_eigenvalue"].as_f64().unwrap() > 2.0);
}

#[test]
fn convergence_ladder_has_second_order_steps() {
    let dir = tempfile::tempdir().unwrap();
    let body = gaussian(
        1.0,
        "preset = \"rigid_rotation\"\nomega = [0.0, 0.0, 0.5]",
        "[convergence]\ngrid_counts = [16, 24]\nspectral_counts = [4, 6]\n",
    );
    let cfg = write_config(dir.path(), "conv.toml", &body);
    let out = run(&["convergence", "--no-timestamp"], &cfg, dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(dir.path(), "run-convergence");
    let order = r["values"]["convergence.fd_current.min_order"]
        .as_f64()
        .unwrap();
    assert!(order >= 1.9, "{order}");
    let csv =
        std::fs::read_to_string(dir.path().join("run-convergence/averaging-point0.csv")).unwrap();
    assert!(csv.starts_with("epsilon,value,abs_error\n"));
}
