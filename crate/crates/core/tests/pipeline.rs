use std::collections::BTreeMap;

use cleanmorse_core::homology::Ring;
use cleanmorse_core::pipeline::{emit_plot_data, fd_order, reglue, run_example, PlotKind, RunConfig, RunReport, SCHEMA_VERSION};
use cleanmorse_core::Error;

fn sphere() -> RunReport {
    run_example(&RunConfig::for_setup("round_sphere"))
}

#[test]
fn sphere_run_is_deterministic_and_round_trips() {
    let a = sphere();
    let b = sphere();
    assert!(a.passed(), "{:?}", a.error);
    assert_eq!(a.schema_version, SCHEMA_VERSION);
    assert_eq!(a.without_timings().unwrap(), b.without_timings().unwrap());
    assert!(a.timings.contains_key("moduli") && a.timings.contains_key("homology"));

    let dir = tempfile::tempdir().unwrap();
    let path = a.write(dir.path()).unwrap();
    let back = RunReport::read(&path).unwrap();
    assert_eq!(back.without_timings().unwrap(), a.without_timings().unwrap());

    let h = a.homology.as_ref().unwrap();
    assert_eq!(h.betti, [1, 0, 1]);
    assert_eq!(h.euler_characteristic, 2);
    let m = &a.moduli[0];
    assert_eq!((m.label.as_str(), m.components.len(), m.components[0].members), ("max->min", 1, 36));
}

#[test]
fn sphere_plot_data() {
    let r = sphere();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plot_data(&r, PlotKind::Trajectories, dir.path()).unwrap();
    assert_eq!(files.len(), 36);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# trajectory"));
    assert_eq!(lines.next().unwrap(), "s,X0,X1,X2");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row.len(), 4);
    assert!((row[1] * row[1] + row[2] * row[2] + row[3] * row[3] - 1.0).abs() < 1e-9);
    // The sphere has no obstructed pieces and so nothing to glue.
    assert!(matches!(emit_plot_data(&r, PlotKind::SectionCurves, dir.path()), Err(Error::MissingSeries(_))));
    assert!(matches!(reglue(&r, &BTreeMap::new()), Ok((pairs, _)) if pairs.is_empty()));
}

#[test]
fn sphere_over_two_element_field() {
    let cfg = RunConfig { ring: Ring::Z2, ..RunConfig::for_setup("round_sphere") };
    let r = run_example(&cfg);
    assert!(r.passed());
    assert_eq!(r.homology.unwrap().betti, [1, 0, 1]);
}

#[test]
fn bad_configs_fail_cleanly() {
    let mut cfg = RunConfig::for_setup("round_sphere");
    cfg.operator.step = 0.0;
    let r = run_example(&cfg);
    assert!(!r.passed());
    assert!(r.error.unwrap().starts_with("Config"));

    let r = run_example(&RunConfig::for_setup("no_such_setup"));
    assert!(r.error.unwrap().starts_with("UnknownSetup"));

    let mut cfg = RunConfig::for_setup("round_sphere");
    cfg.gluing.delta1 = 6.0;
    assert!(run_example(&cfg).error.unwrap().starts_with("Config"));
}

#[test]
fn config_json_defaults() {
    let cfg: RunConfig = serde_json::from_str(r#"{"setup": "tilted_torus", "seed": 4}"#).unwrap();
    assert_eq!(cfg.setup, "tilted_torus");
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.checks.adjoint_pairs, 50);
    assert_eq!(cfg.gluing.delta2, 5.0);
    let text = serde_json::to_string(&cfg).unwrap();
    let again: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), text);
}

#[test]
fn observed_order_of_power_laws() {
    let hs = [1e-2, 1e-3, 1e-4];
    for p in [1.0, 2.0] {
        let d: Vec<f64> = hs.iter().map(|h: &f64| 3.0 * h.powf(p)).collect();
        assert!((fd_order(&hs, &d) - p).abs() < 1e-12);
    }
    assert!(fd_order(&hs, &[0.0, 0.0, 1e-5]).is_nan());
}
