//! End-to-end tests of the `sppfem` binary: exit codes, emitted files, and
//! the manifest round-trip.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sppfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sppfem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn circle_config(out_dir: &Path) -> String {
    format!(
        r#"
flow = "curvature"
density = "iso"
alpha = 0.0
n = 32
tau = 1e-3
t_final = 0.01
shape = "circle"
output_dir = "{}"
"#,
        out_dir.display()
    )
}

#[test]
fn run_completes_and_emits_diagnostics_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let config = write_config(tmp.path(), "run.toml", &circle_config(&out));

    let result = sppfem(&["run", &config]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let diagnostics = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let mut lines = diagnostics.lines();
    assert_eq!(
        lines.next(),
        Some("step,t,area,energy,mesh_ratio,newton_iters,area_residual,energy_delta")
    );
    // Initial row plus 10 steps of 1e-3 up to t = 0.01.
    assert_eq!(lines.count(), 11);

    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("[config]"));
    assert!(manifest.contains("stop = \"horizon\""));
    assert!(manifest.contains("[stabilizer_table]"));
}

#[test]
fn rerunning_a_manifest_reproduces_diagnostics_bitwise() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let config = write_config(tmp.path(), "run.toml", &circle_config(&first));
    assert!(sppfem(&["run", &config]).status.success());

    let second = tmp.path().join("second");
    let manifest_path = first.join("manifest.toml");
    let result = sppfem(&[
        "run",
        manifest_path.to_str().unwrap(),
        "--output-dir",
        second.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let a = fs::read(first.join("diagnostics.csv")).unwrap();
    let b = fs::read(second.join("diagnostics.csv")).unwrap();
    assert!(!a.is_empty() && a == b, "diagnostics differ between runs");
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let tmp = TempDir::new().unwrap();
    // Missing required keys.
    let incomplete = write_config(tmp.path(), "bad1.toml", "flow = \"curvature\"\n");
    let result = sppfem(&["run", &incomplete]);
    assert_eq!(result.status.code(), Some(1));
    assert!(!result.stderr.is_empty());

    // Unknown density spec.
    let out = tmp.path().join("out");
    let body = circle_config(&out).replace("\"iso\"", "\"gaussian\"");
    let unknown = write_config(tmp.path(), "bad2.toml", &body);
    let result = sppfem(&["run", &unknown]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("gaussian"));

    // Missing file.
    let result = sppfem(&["run", "no-such-config.toml"]);
    assert_eq!(result.status.code(), Some(1));

    // Usage errors share the config exit code (2 is reserved for pinch-off).
    let result = sppfem(&["frobnicate"]);
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn exhausted_newton_budget_exits_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let body = format!("{}max_newton_iters = 0\n", circle_config(&out));
    let config = write_config(tmp.path(), "run.toml", &body);
    let result = sppfem(&["run", &config]);
    assert_eq!(result.status.code(), Some(3));
    // Partial artifacts are still emitted.
    assert!(out.join("diagnostics.csv").exists());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("stop = \"newton_diverged\""));
}

#[test]
fn self_intersecting_initial_curve_is_refused_unless_allowed() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let body = circle_config(&out)
        .replace("\"circle\"", "\"lemniscate\"")
        .replace("\"curvature\"", "\"surface_diffusion\"")
        .replace("n = 32", "n = 64")
        .replace("tau = 1e-3", "tau = 1e-6")
        .replace("t_final = 0.01", "t_final = 5e-6");
    let refused = write_config(tmp.path(), "refused.toml", &body);
    let result = sppfem(&["run", &refused]);
    assert_eq!(result.status.code(), Some(1), "default policy must refuse");

    let allowed = write_config(
        tmp.path(),
        "allowed.toml",
        &format!("{body}pinch_off = \"allow\"\n"),
    );
    let result = sppfem(&["run", &allowed]);
    assert_eq!(
        result.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
}

#[test]
fn snapshot_schedule_writes_curve_files() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let body = format!("{}snapshots = \"times:0,0.005,0.01\"\n", circle_config(&out));
    let config = write_config(tmp.path(), "run.toml", &body);
    assert!(sppfem(&["run", &config]).status.success());

    let snaps: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|name| name.starts_with("snap_"))
        .collect();
    assert_eq!(snaps.len(), 3, "snapshots found: {snaps:?}");
    // Snapshot files parse back as curves with the configured vertex count.
    for name in &snaps {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().next(), Some("x,y"));
        assert_eq!(text.lines().count(), 33);
    }
}

#[test]
fn understabilized_run_warns_but_proceeds() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let body = circle_config(&out)
        .replace("\"iso\"", "\"case2\"")
        .replace("t_final = 0.01", "t_final = 2e-3")
        + "stabilizer = \"constant:0.5\"\n";
    let config = write_config(tmp.path(), "run.toml", &body);
    let result = sppfem(&["run", &config]);
    assert_eq!(result.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(
        stderr.contains("warning") && stderr.contains("stabilizer"),
        "stderr: {stderr}"
    );
}

#[test]
fn kmin_prints_the_21_node_table() {
    let result = sppfem(&["kmin", "iso", "--alpha=-1"]);
    assert!(result.status.success());
    let stdout = String::from_utf8(result.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("theta,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    // Isotropic: k0 = 0, so k_min = -(alpha - 1) gamma = 2 at every node.
    for row in rows {
        let value: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((value - 2.0).abs() < 1e-8, "row `{row}`");
    }
}

#[test]
fn distance_reports_the_symmetric_difference_area() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, "x,y\n0,0\n1,0\n1,1\n0,1\n").unwrap();
    fs::write(&b, "x,y\n3,0\n4,0\n4,1\n3,1\n").unwrap();
    let result = sppfem(&["distance", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(result.status.success());
    let printed: f64 = String::from_utf8(result.stdout).unwrap().trim().parse().unwrap();
    assert_eq!(printed, 2.0);
}

#[test]
fn sweep_writes_the_three_study_tables() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("study");
    let body = format!(
        r#"
flow = "curvature"
density = "iso"
alphas = [0.0]
shape = "circle"
base_level = 3
num_levels = 2
eval_times = [0.05]
reference_level = 5
output_dir = "{}"
workers = 2
"#,
        out.display()
    );
    let study = write_config(tmp.path(), "study.toml", &body);
    let result = sppfem(&["sweep", &study]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(
        errors.lines().next(),
        Some("alpha,level,h,tau,t,error,order,note")
    );
    // 1 alpha x 2 levels x 1 time.
    assert_eq!(errors.lines().count(), 3);
    assert!(out.join("audit.csv").exists());
    assert!(out.join("decay.csv").exists());
}
