use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fbz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbz")).args(args).output().unwrap()
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = fbz(&["run", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.cfg"));
}

#[test]
fn bad_key_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "grid.Nx = 8\ngrid.Nxx = 4\n").unwrap();
    let o = fbz(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("grid.Nxx") && err.contains('2'), "{err}");
}

#[test]
fn oracle_passes_on_the_tiny_grid() {
    let o = fbz(&["oracle", config("tiny_oracle.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max deviation"));
}

#[test]
fn run_then_diag_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.cfg");
    std::fs::write(
        &cfg,
        "grid.Nx = 4\ngrid.vmax = 4\ngrid.Nv = 8\ngrid.Nomega = 8\ntime.T = 0.04\ntime.dt = 0.02\ndiag.moments = 2\n",
    )
    .unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fbz(&["run", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,mass,px,py,energy,H,D,clipped_mass,projection_l1,M_2"
    );
    assert_eq!(lines.count(), 3);
    let snap = dir.path().join("final.fbz");
    let o = fbz(&["diag", snap.to_str().unwrap(), "--dissipation", "--moments", "2", "--sigma", "0.1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("\nD ") && text.contains("M_2 "), "{text}");
}

#[test]
fn sigma_zero_points_to_local_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.cfg");
    std::fs::write(&cfg, "sigma = 0\n").unwrap();
    let o = fbz(&["sweep", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode=local"));
}
