use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vism::coupling::{solve_system, Start};
use vism::{CouplingConfig, EvolutionConfig, Molecule, PhysicalParams, SolvationSystem};

fn vism(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vism"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VISM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const DIATOMIC: &str = "-1.5 0 0 0.5 1.9 C\n1.5 0 0 -0.5 1.9 C\n";

#[test]
fn neutral_atom_has_no_polar_energy() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.mol"), "0 0 0 0 1.9 C\n").unwrap();
    let o = vism(&["solve", "--molecule", "a.mol", "--out", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&dir.path().join("out/energy.json"));
    assert_eq!(doc["polar"].as_f64().unwrap(), 0.0);
    assert_eq!(doc["converged"], Value::Bool(true));
    assert!(doc["total"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_lj_tag_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.mol"), "0 0 0 0 1.9 C\n1 0 0 0 1.5 Xe\n").unwrap();
    let o = vism(&["solve", "--molecule", "a.mol", "--out", "out"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`Xe`"), "{}", stderr(&o));
    assert!(!dir.path().join("out/energy.json").exists());
}

#[test]
fn malformed_molecule_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.mol"), "0 0 0 0 1.9 C\n1 0 0 zero 1.9 C\n").unwrap();
    let o = vism(&["solve", "--molecule", "a.mol"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("a.mol:2:"), "{}", stderr(&o));
}

#[test]
fn cli_matches_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("di.mol"), DIATOMIC).unwrap();
    let o = vism(&["solve", "--molecule", "di.mol", "--out", "out", "--threads", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = json(&dir.path().join("out/energy.json"));

    let mol = Molecule::parse(DIATOMIC, "di").unwrap();
    let (params, cfg) = (PhysicalParams::default(), CouplingConfig::default());
    let sys = SolvationSystem::new(&mol, &params, &cfg).unwrap();
    let sol = solve_system(&sys, &cfg, &EvolutionConfig::default(), Start::Profile(cfg.init), &mut |_| {}).unwrap();
    for (key, v) in [
        ("total", sol.report.total),
        ("polar", sol.report.polar),
        ("repulsive", sol.report.repulsive),
        ("attractive", sol.report.attractive),
    ] {
        assert_eq!(doc[key].as_f64().unwrap().to_bits(), v.to_bits(), "{key}");
    }
    assert_eq!(doc["outer_iterations"].as_u64().unwrap() as usize, sol.outer_iterations());
}

#[test]
fn effective_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.mol"), "0 0 0 0.3 1.9 C\n").unwrap();
    fs::write(d.join("run.toml"), "molecule = \"a.mol\"\n[params]\ngamma = 0.08\n[coupling.grid]\nh = 0.6\n[salt]\nmolar = 0.1\n").unwrap();
    let o = vism(&["solve", "--config", "run.toml", "--out", "first", "--dump-fields"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = vism(&["solve", "--config", "first/effective_config.toml", "--out", "second"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["energy.json", "u.field", "psi.field"] {
        assert_eq!(fs::read(d.join("first").join(f)).unwrap(), fs::read(d.join("second").join(f)).unwrap(), "{f}");
    }
    let u = vism::io::read_field(&d.join("second/u.field")).unwrap();
    assert_eq!(u.grid().spacing(), 0.6);
}

#[test]
fn csv_dumps_replace_binary() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.mol"), "0 0 0 0 1.9 C\n").unwrap();
    let o = vism(&["solve", "--molecule", "a.mol", "--out", "o", "--dump-fields", "--csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("o/u.csv")).unwrap();
    assert!(text.starts_with("i j k value\n"));
    assert!(!dir.path().join("o/u.field").exists());
    // electrostatics stay on for a neutral solute, so ψ is dumped too
    assert!(dir.path().join("o/psi.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[params]\ngama = 0.1\n").unwrap();
    let o = vism(&["born", "--config", "run.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));
}

#[test]
fn empty_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("set.txt"), "# nothing here\n").unwrap();
    let o = vism(&["fit", "--manifest", "set.txt"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no molecules"), "{}", stderr(&o));
}

#[test]
fn nonpolar_manifest_skips_potential_solves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut manifest = String::from("@nonpolar\n");
    for (i, sep) in [0.0, 2.5, 3.5, 4.5].iter().enumerate() {
        let text = if *sep == 0.0 {
            "0 0 0 0.4 1.9 C\n".to_string()
        } else {
            format!("0 0 0 0.4 1.9 C\n{sep} 0 0 -0.4 1.9 C\n")
        };
        fs::write(d.join(format!("m{i}.mol")), text).unwrap();
        manifest.push_str(&format!("m{i}.mol {}\n", 1.0 + i as f64));
    }
    fs::write(d.join("set.txt"), manifest).unwrap();
    fs::write(d.join("run.toml"), "[coupling.grid]\nh = 0.6\npad = 3.0\n[fit]\nmax_fit_iters = 2\n").unwrap();
    let o = vism(&["fit", "--manifest", "set.txt", "--config", "run.toml", "--out", "o"], d);
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    let doc = json(&d.join("o/fit.json"));
    assert_eq!(doc["nonpolar"], Value::Bool(true));
    assert_eq!(doc["pb_solves"].as_u64(), Some(0));
    assert!(doc["parameters"]["gamma"].as_f64().unwrap() >= 0.0);
}

#[test]
fn born_meets_analytic_within_five_percent() {
    let dir = tempfile::tempdir().unwrap();
    let o = vism(&["born", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("b/born.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("h energy analytic rel_error"));
    let last: Vec<f64> = lines.last().unwrap().split(' ').map(|s| s.parse().unwrap()).collect();
    assert_eq!(last[0], 0.25);
    assert!(last[3] < 0.05, "{last:?}");
    assert!(((last[1] - last[2]) / last[2]).abs() < 0.05);
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let o = vism(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&vism(&["solve", "--no-such-flag"], dir.path())), 64);
    assert_eq!(code(&vism(&[], dir.path())), 64);
    assert_eq!(code(&vism(&["--help"], dir.path())), 0);
    assert_eq!(code(&vism(&["--version"], dir.path())), 0);
}

#[test]
fn bad_thread_env_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vism"))
        .args(["born"])
        .current_dir(dir.path())
        .env("VISM_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("VISM_THREADS"));
}

#[test]
fn sweep_q_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.mol"), "0 0 0 0 1.9 C\n").unwrap();
    fs::write(d.join("run.toml"), "molecule = \"a.mol\"\n[sweep]\nq_values = [1.01, 1.001]\n[coupling.grid]\nh = 0.6\n").unwrap();
    let o = vism(&["sweep-q", "--config", "run.toml", "--out", "s"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("s/sweep_q.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "q_k total_energy diff");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1.01 "));
}
