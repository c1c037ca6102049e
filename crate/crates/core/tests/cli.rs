//! End-to-end tests of the command-line front end.

use std::fs;
use std::path::Path;

use cusp_pressure::cli::{load_config, run_from, PRESETS};
use cusp_pressure::potentials::PotentialSpec;
use serde_json::Value;

fn run(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["cusp-pressure", cmd, "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run_from(args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    write_named(dir, "config.json", body)
}

fn write_named(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn every_preset_parses() {
    for (name, _) in PRESETS {
        load_config(name).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn parabolic_unit_exponent_is_one_half() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("critexp", "parabolic-unit", dir.path(), &[]), 0);
    let r = json(&dir.path().join("critexp.json"));
    let v = r["estimate"]["value"].as_f64().unwrap();
    assert!((v - 0.5).abs() <= 0.03, "{v}");
    let csv = fs::read_to_string(dir.path().join("counts.csv")).unwrap();
    assert!(csv.starts_with("R,N,"));
}

#[test]
fn cyclic_hyperbolic_exponent_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("critexp", "cyclic-hyperbolic", dir.path(), &[]), 0);
    let v = json(&dir.path().join("critexp.json"))["estimate"]["value"].as_f64().unwrap();
    assert!(v.abs() <= 0.02, "{v}");
}

#[test]
fn malformed_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        "{ not json",
        r#"{"schema_version": 1, "unknown_field": 3}"#,
        r#"{"schema_version": 7}"#,
        r#"{"schema_version": 1, "radius": 0}"#,
        r#"{"schema_version": 1, "t_grid": [0.5, 0.1]}"#,
        r#"{"schema_version": 1, "metric": {"kind": "warped", "profile": "missing.csv"}}"#,
        r#"{"schema_version": 1, "group": {"kind": "schottky", "parabolic": [1, 0.5, 0, 1], "hyperbolics": [[2, -3, -1, 2]]}}"#,
    ];
    for body in bad {
        let cfg = write_config(dir.path(), body);
        assert_eq!(run("critexp", &cfg, &dir.path().join("out"), &[]), 2, "{body}");
    }
    assert_eq!(run("critexp", "no-such-preset", dir.path(), &[]), 2);
    assert_eq!(run_from(["cusp-pressure", "critexp"]), 2);
    assert_eq!(run_from(["cusp-pressure", "frobnicate"]), 2);
}

#[test]
fn zero_potential_gives_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"schema_version": 1, "radius": 10, "potential": {"kind": "zero"}, "t_grid": {"start": -1, "stop": 1, "step": 0.5}}"#,
    );
    assert_eq!(run("pressure-curve", &cfg, &dir.path().join("out"), &[]), 0);
    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join("pressure.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-12));
    assert_eq!(json(&out.join("transition.json"))["report"]["kind"], "None");
    let svg = fs::read_to_string(out.join("pressure.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}

#[test]
fn thrice_punctured_sphere_sweep_reports_type_a() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("pressure-curve", "thrice-punctured-sphere", dir.path(), &[]), 0);
    let sweep = json(&dir.path().join("transition.json"));
    let entries = sweep.as_array().unwrap();
    assert_eq!(entries.len(), 4);
    let n2 = &entries[0];
    assert_eq!(n2["n"], 2);
    assert_eq!(n2["report"]["kind"], "A");
    let t_f = n2["report"]["t_f"]["value"].as_f64().unwrap();
    assert!((-1.05..0.0).contains(&t_f), "{t_f}");
    for n in [2, 4, 8, 16] {
        assert!(dir.path().join(format!("pressure_n{n}.csv")).is_file());
    }
}

#[test]
fn slow_potential_writes_a_loadable_spec() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("slow-potential", "thrice-punctured-sphere", dir.path(), &[]), 0);
    let spec = PotentialSpec::from_json(&fs::read_to_string(dir.path().join("potential.json")).unwrap()).unwrap();
    assert!(!spec.profile.breakpoints.is_empty());
    let report = json(&dir.path().join("slow_potential_report.json"));
    assert_eq!(report["passed"], true);
    for t in report["tails"].as_array().unwrap() {
        assert_eq!(t[3], true);
    }

    // the written spec drives a pressure curve as a profile potential
    let cfg = write_config(
        dir.path(),
        r#"{"schema_version": 1, "radius": 10, "powers": [2, 1], "potential": {"kind": "profile", "path": "potential.json"}, "t_grid": [-1.0, -0.5, 0.0, 0.5]}"#,
    );
    assert_eq!(run("pressure-curve", &cfg, &dir.path().join("curve"), &[]), 0);
}

#[test]
fn built_profile_passes_pinching_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema_version": 1, "metric": {"kind": "warped"}}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("build-cusp", &cfg, &a, &[]), 0);
    assert_eq!(run("build-cusp", &cfg, &b, &[]), 0);
    assert_eq!(fs::read(a.join("profile.csv")).unwrap(), fs::read(b.join("profile.csv")).unwrap());
    assert_eq!(fs::read(a.join("build_report.json")).unwrap(), fs::read(b.join("build_report.json")).unwrap());
    assert_eq!(run("verify-pinching", &cfg, &a, &[]), 0);
    let r = json(&a.join("pinching.json"));
    assert_eq!(r["passed"], true);

    let from_file = write_named(
        dir.path(),
        "from_file.json",
        &format!(r#"{{"schema_version": 1, "metric": {{"kind": "warped", "profile": "{}"}}}}"#, a.join("profile.csv").display()),
    );
    assert_eq!(run("verify-pinching", &from_file, &dir.path().join("c"), &[]), 0);
    assert_eq!(run("verify-pinching", &cfg, &dir.path().join("empty"), &[]), 2);
}

#[test]
fn critexp_output_independent_of_workers_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema_version": 1, "radius": 10, "orbit_cache": "orbit.cache"}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("critexp", &cfg, &a, &["--workers", "1"]), 0);
    assert!(dir.path().join("orbit.cache").is_file());
    assert_eq!(run("critexp", &cfg, &b, &["--workers", "3"]), 0);
    assert_eq!(fs::read(a.join("counts.csv")).unwrap(), fs::read(b.join("counts.csv")).unwrap());
    assert_eq!(fs::read(a.join("critexp.json")).unwrap(), fs::read(b.join("critexp.json")).unwrap());

    let fresh = dir.path().join("fresh");
    assert_eq!(run("critexp", "schottky", &fresh, &["--radius", "10", "--workers", "2"]), 0);
    assert_eq!(fs::read(a.join("counts.csv")).unwrap(), fs::read(fresh.join("counts.csv")).unwrap());
    let r = json(&fresh.join("critexp.json"));
    assert!(r["gap_sigmas"].as_f64().unwrap() > 3.0);
}

#[test]
fn orbit_stats_and_warped_critexp() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("orbit-stats", "warped-cusp", dir.path(), &[]), 0);
    let r = json(&dir.path().join("orbit_stats.json"));
    assert_eq!(r["no_trend"], true);
    assert_eq!(r["within_constants"], true);
    let csv = fs::read_to_string(dir.path().join("orbit_stats.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n,d_T,2u,residual_d,t_n,u,residual_t");
    assert_eq!(csv.lines().count(), 301);
    assert_eq!(run("critexp", "warped-cusp", dir.path(), &[]), 0);
    let v = json(&dir.path().join("critexp.json"))["estimate"]["value"].as_f64().unwrap();
    assert!((v - 0.5).abs() <= 0.05, "{v}");
}

#[test]
fn geometric_potential_on_glued_surface() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("pressure-curve", "glued-geometric", dir.path(), &[]), 0);
    for f in ["pressure.csv", "pressure.svg", "geometric.csv", "geometric.svg", "normalized_u.csv", "transition.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let r = json(&dir.path().join("transition.json"));
    let kind = r["report"]["kind"].as_str().unwrap();
    assert!(kind == "A" || kind == "Inconclusive", "{kind}");
    assert!(r["sandwich"].as_array().unwrap().iter().all(|row| row["passed"] == true));
}
