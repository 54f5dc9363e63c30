//! End-to-end checks of the command-line harness: exit codes, bytewise
//! determinism of CSV outputs, manifest digests, and checkpoint resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_membrane"))
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("reading {name} in {}: {e}", dir.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

#[test]
fn breather_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["breather", "--seed", "9"])
            .args(["--set", "initial.r0=1.05"])
            .args(["--set", "time.t_end=2.0"])
            .args(["--set", "time.dt=1e-3"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = read(&out_a, "report.csv");
    let b = read(&out_b, "report.csv");
    assert!(!a.is_empty());
    assert_eq!(a, b, "identical config + seed must give identical bytes");

    // Manifest sanity: period near π for the small oscillation, digests
    // match the emitted files.
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&out_a, "manifest.json")).unwrap();
    let period = manifest["extra"]["period"].as_f64().unwrap();
    assert!((period - std::f64::consts::PI).abs() < 0.05, "period {period}");
    for output in manifest["outputs"].as_array().unwrap() {
        let rel = output["path"].as_str().unwrap();
        let bytes = fs::read(out_a.join(rel)).unwrap();
        assert_eq!(
            output["sha256"].as_str().unwrap(),
            sha256_hex(&bytes),
            "digest mismatch for {rel}"
        );
        assert_eq!(output["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn invalid_dt_exits_2_with_manifest_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args(["simulate"])
        .args(["--set", "time.dt=-1"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let entries: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["manifest.json"], "unexpected outputs: {entries:?}");
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert!(manifest["error"]
        .as_str()
        .unwrap()
        .contains("must be positive"));
}

#[test]
fn unknown_config_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    fs::write(&cfg_path, "[grid]\nlmax = 6\nbogus = 1\n").unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args(["spectrum"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert!(manifest["error"].as_str().unwrap().contains("bogus"));
}

#[test]
fn spectrum_lists_identity_multipliers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args(["spectrum", "--set", "grid.lmax=6"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "report.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "index,l,m,eigenvalue,residual"
    );
    // Top of the spectrum: the three l = 1 zero modes, then -4 with
    // multiplicity 6 (l = 0 plus the five l = 2 modes).
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    for row in &rows[..3] {
        assert_eq!(row[1], "1");
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    }
    for row in &rows[3..9] {
        assert_eq!(row[3].parse::<f64>().unwrap(), -4.0);
    }
    for row in &rows {
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0, "nonzero residual");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    let top = manifest["extra"]["deflated_top_eigenvalue"].as_f64().unwrap();
    assert!((top + 4.0).abs() < 1e-6);
}

#[test]
fn simulate_checkpoints_and_resume_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let out_full = tmp.path().join("full");
    let common = [
        "--set",
        "grid.lmax=5",
        "--set",
        "time.dt=0.01",
        "--set",
        "time.sample_every=5",
        "--set",
        "initial.kind=radial",
        "--set",
        "initial.r0=1.02",
        "--set",
        "physics.b=0.0",
        "--set",
        "simulate.checkpoint_every=10",
    ];
    let status = bin()
        .args(["simulate"])
        .args(common)
        .args(["--set", "time.t_end=0.4"])
        .arg("--out")
        .arg(&out_full)
        .status()
        .unwrap();
    assert!(status.success());

    // Resume from the step-10 checkpoint and run to the same horizon.
    let ckpt = out_full.join("checkpoints/step_00000010.memb");
    assert!(ckpt.exists(), "missing mid-run checkpoint");
    let out_resumed = tmp.path().join("resumed");
    let status = bin()
        .args(["simulate"])
        .args(common)
        .args(["--set", "time.t_end=0.4"])
        .arg("--resume")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out_resumed)
        .status()
        .unwrap();
    assert!(status.success());

    // The final states must agree bit for bit.
    let final_of = |dir: &Path| -> PathBuf {
        let mut files: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files.pop().unwrap()
    };
    let a = fs::read(final_of(&out_full)).unwrap();
    let b = fs::read(final_of(&out_resumed)).unwrap();
    assert_eq!(a, b, "resumed run drifted from the uninterrupted run");
}

#[test]
fn resume_from_corrupted_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let ckpt = tmp.path().join("broken.memb");
    fs::write(&ckpt, b"MEMBnotreally").unwrap();
    let status = bin()
        .args(["simulate", "--set", "grid.lmax=4"])
        .arg("--resume")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert!(manifest["error"].as_str().unwrap().contains("resume"));
}

#[test]
fn degenerate_simulation_exits_3_with_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args(["simulate"])
        .args([
            "--set",
            "grid.lmax=6",
            "--set",
            "initial.modes=2,1,0.9,normal",
            "--set",
            "time.t_end=20",
            "--set",
            "time.dt=0.005",
            "--set",
            "physics.b=0.0",
            "--set",
            "simulate.checkpoint_every=0",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    // Partial CSV preserved and parseable.
    let csv = read(&out, "report.csv");
    assert!(csv.lines().count() >= 2, "no data rows preserved");
    for line in csv.lines().skip(1) {
        for field in line.split(',') {
            field.parse::<f64>().unwrap();
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert!(manifest["error"].as_str().unwrap().contains("degenerated"));
}

#[test]
fn linear_and_split_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("linear");
    let status = bin()
        .args([
            "linear",
            "--set",
            "grid.lmax=6",
            "--set",
            "time.t_end=4",
            "--set",
            "linear.modes=2,0,1.0",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "report.csv");
    assert!(csv.lines().next().unwrap().contains("coeff_2_0"));

    let out = tmp.path().join("split");
    let status = bin()
        .args([
            "split",
            "--set",
            "grid.lmax=6",
            "--set",
            "time.t_end=6",
            "--set",
            "split.modes=2,0,1e-2,normal",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let splitting: serde_json::Value = serde_json::from_str(&read(&out, "splitting.json")).unwrap();
    let c = splitting["c"].as_array().unwrap();
    for v in c {
        assert!(v.as_f64().unwrap().abs() < 1e-9, "pure l=2 data has c = 0");
    }
    assert!(out.join("y_field.csv").exists());

    // v decays along the trajectory.
    let csv = read(&out, "report.csv");
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    let first = rows.first().unwrap()[1];
    let last = rows.last().unwrap()[1];
    assert!(last < 0.2 * first, "no visible decay: {first} -> {last}");
}

#[test]
fn smoothing_and_nashmoser_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("smoothing");
    let status = bin()
        .args([
            "smoothing-axioms",
            "--set",
            "grid.lmax=8",
            "--set",
            "smoothing.samples=20",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert!(manifest["extra"]["telescope_error"].as_f64().unwrap() < 1e-12);

    let out = tmp.path().join("nm");
    let status = bin()
        .args([
            "nash-moser",
            "--set",
            "grid.lmax=4",
            "--set",
            "time.t_end=1.0",
            "--set",
            "time.dt=0.01",
            "--set",
            "nashmoser.modes=2,0,1e-5,normal",
            "--set",
            "nashmoser.tol=1e-7",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "nash-moser run failed");
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["extra"]["converged"].as_bool(), Some(true));
}

#[test]
fn lifespan_scan_reports_global_flag_for_damped_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args([
            "lifespan-scan",
            "--set",
            "grid.lmax=5",
            "--set",
            "time.t_end=2",
            "--set",
            "physics.b=1.0",
            "--set",
            "lifespan.epsilons=1e-3",
            "--set",
            "lifespan.threshold=0.3",
            "--set",
            "initial.modes=2,0,1.0,normal",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&out, "report.csv");
    assert!(csv.contains("global"));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["extra"]["flag"].as_str(), Some("global"));
}
