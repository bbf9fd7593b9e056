use std::path::Path;
use std::process::{Command, Output};

fn cleanmorse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cleanmorse")).args(args).current_dir(cwd).env_remove("CLEANMORSE_OUT").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cleanmorse(&["selftest"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(text.contains("contractions_upright_genus2"));
}

#[test]
fn strata_of_top_torus_entry() {
    let dir = tempfile::tempdir().unwrap();
    let o = cleanmorse(&["strata", "upright_torus", "--level", "6"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("entry 6: p->s"));
    for chart in ["chart 6 ", "chart 43 ", "chart 15 ", "chart 123 "] {
        assert!(text.contains(chart), "{chart} missing from\n{text}");
    }
    let bad = cleanmorse(&["strata", "upright_torus", "--level", "9"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sphere_run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = cleanmorse(&["run", "round_sphere", "--out", "sphere"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("betti (Z) [1, 0, 1]"));
    let report = dir.path().join("sphere/report.json");
    assert!(report.exists());
    let p = cleanmorse(&["plot", report.to_str().unwrap(), "--what", "trajectories"], dir.path());
    assert!(p.status.success());
    assert_eq!(std::fs::read_dir(dir.path().join("sphere/plots")).unwrap().count(), 36);
    let none = cleanmorse(&["plot", report.to_str().unwrap(), "--what", "section_curves"], dir.path());
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("section"), "{:?}", none);
}

#[test]
fn vanishing_perturbation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cleanmorse(&["run", "upright_torus", "--out", "t", "--sigma", "q->r#0=0", "--sigma", "q->r#1=0"], dir.path());
    assert!(!o.status.success());
    assert!(stdout(&o).contains("NotTransverse"), "{}", stdout(&o));
    assert!(dir.path().join("t/report.json").exists());
}

#[test]
fn custom_setup_file_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), r#"{"name": "small", "family": "sphere", "dim": 2}"#).unwrap();
    let o = cleanmorse(&["strata", "small.json", "--level", "1"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("max->min"));
    let unknown = cleanmorse(&["run", "klein_bottle", "--out", "k"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stdout(&unknown).contains("UnknownSetup"));
    let bad_sigma = cleanmorse(&["run", "round_sphere", "--sigma", "oops"], dir.path());
    assert_eq!(bad_sigma.status.code(), Some(2));
}
