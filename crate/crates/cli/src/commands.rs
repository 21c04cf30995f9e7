use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use vism::coupling::{solve_system, Start};
use vism::io::{field_to_csv, read_manifest, write_atomic, write_field};
use vism::validation::{born_sharp, n_sweep, q_sweep, richardson_order, SweepResult};
use vism::{fit_parameters, FitParameters, FitState, Molecule, ScalarField, Solution, SolvationSystem};

use crate::config::RunConfig;

fn molecule(cfg: &RunConfig) -> Result<Molecule> {
    let path = cfg.molecule.as_deref().context("no molecule given (use --molecule or `molecule` in the config)")?;
    let mol = Molecule::from_file(path)?;
    cfg.params.lj.check_covers(&mol)?;
    Ok(mol)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn dump(cfg: &RunConfig, name: &str, field: &ScalarField) -> Result<()> {
    let dir = cfg.out_dir();
    if cfg.csv {
        write_atomic(&dir.join(format!("{name}.csv")), field_to_csv(field).as_bytes())?;
    } else {
        write_field(&dir.join(format!("{name}.field")), field)?;
    }
    Ok(())
}

/// Flat report: energy terms at the top level, then run diagnostics.
pub fn energy_document(sol: &Solution) -> Value {
    let r = &sol.report;
    let b = &r.breakdown;
    let g = sol.u.grid();
    json!({
        "total": r.total,
        "polar": r.polar,
        "repulsive": r.repulsive,
        "attractive": r.attractive,
        "tv": b.tv,
        "pressure_volume": b.pressure_volume,
        "vdw": b.vdw,
        "fixed_charge": b.fixed_charge,
        "dielectric": b.dielectric,
        "ionic": b.ionic,
        "converged": sol.converged,
        "outer_iterations": sol.outer_iterations(),
        "evolution_steps": sol.evolution_steps,
        "energy_increases": sol.energy_increases,
        "evolution_violations": sol.evolution_violations,
        "grid_dims": g.dims(),
        "grid_origin": g.origin(),
        "grid_spacing": g.spacing(),
        "trace": sol.trace,
    })
}

pub fn solve(cfg: &RunConfig) -> Result<bool> {
    let mol = molecule(cfg)?;
    let sys = SolvationSystem::new(&mol, &cfg.params, &cfg.coupling)?;
    let sol = solve_system(&sys, &cfg.coupling, &cfg.evolution, Start::Profile(cfg.coupling.init), &mut |_| {})?;
    let out = cfg.out_dir();
    write_json(&out.join("energy.json"), &energy_document(&sol))?;
    if cfg.dump_fields {
        dump(cfg, "u", sol.u.u())?;
        if let Some(p) = &sol.psi {
            dump(cfg, "psi", &p.psi)?;
        }
    }
    println!(
        "total {:.6} kcal/mol (polar {:.6}, nonpolar {:.6}); {} outer iterations, converged {}",
        sol.report.total,
        sol.report.polar,
        sol.report.nonpolar(),
        sol.outer_iterations(),
        sol.converged
    );
    if !sol.converged {
        log::warn!("self-consistent iteration did not converge");
    }
    Ok(sol.converged)
}

pub fn fit(cfg: &RunConfig) -> Result<bool> {
    let path = cfg.manifest.as_deref().context("no manifest given (use --manifest or `manifest` in the config)")?;
    let ds = read_manifest(path)?;
    for e in &ds.entries {
        cfg.params.lj.check_covers(&e.molecule).with_context(|| format!("molecule {}", e.name))?;
    }
    let init = FitState::new(FitParameters::from_params(&cfg.params, &ds.tags())?);
    let st = fit_parameters(&ds, init, &cfg.params, &cfg.coupling, &cfg.evolution, &cfg.fit)?;
    let pb_solves = st.solutions.iter().flatten().filter(|s| s.psi.is_some()).count();
    let entries: Vec<Value> = ds
        .entries
        .iter()
        .zip(st.solutions.iter().map(Some).chain(std::iter::repeat(None)))
        .map(|(e, s)| {
            let computed = s.and_then(|s| s.as_ref()).map(|s| s.report.total);
            json!({ "name": e.name, "experimental": e.experimental, "computed": computed })
        })
        .collect();
    let excluded: Vec<Value> = st
        .excluded
        .iter()
        .map(|(name, reason)| json!({ "name": name, "reason": reason }))
        .collect();
    let doc = json!({
        "parameters": st.params,
        "rms": st.rms,
        "converged": st.converged,
        "iterations": st.iterations,
        "rms_history": st.rms_history,
        "history": st.history,
        "nonpolar": ds.nonpolar,
        "pb_solves": pb_solves,
        "entries": entries,
        "excluded": excluded,
    });
    write_json(&cfg.out_dir().join("fit.json"), &doc)?;
    println!(
        "gamma {:.6} pressure {:.6} eps {:?}; rms {:.4} after {} rounds, converged {}",
        st.params.gamma, st.params.pressure, st.params.eps, st.rms, st.iterations, st.converged
    );
    Ok(st.converged)
}

fn finish_sweep(cfg: &RunConfig, name: &str, res: &SweepResult) -> Result<bool> {
    write_atomic(&cfg.out_dir().join(name), res.to_csv().as_bytes())?;
    let mut ok = true;
    for e in &res.entries {
        if let Some(err) = &e.error {
            eprintln!("{} = {}: {err}", res.axis_name, e.axis);
            ok = false;
        } else if !e.converged {
            eprintln!("{} = {}: not converged", res.axis_name, e.axis);
            ok = false;
        }
    }
    print!("{}", res.to_csv());
    if let Some(s) = res.relative_spread() {
        println!("relative spread {s:.3e}");
    }
    Ok(ok)
}

pub fn sweep_q(cfg: &RunConfig) -> Result<bool> {
    let mol = molecule(cfg)?;
    let res = q_sweep(&mol, &cfg.params, &cfg.sweep.q_values, &cfg.coupling, &cfg.evolution)?;
    finish_sweep(cfg, "sweep_q.csv", &res)
}

pub fn sweep_n(cfg: &RunConfig) -> Result<bool> {
    let mol = molecule(cfg)?;
    let res = n_sweep(&mol, &cfg.params, &cfg.sweep.n_values, &cfg.coupling, &cfg.evolution)?;
    finish_sweep(cfg, "sweep_n.csv", &res)
}

pub fn born(cfg: &RunConfig) -> Result<bool> {
    let b = &cfg.born;
    let runs = b
        .h_values
        .iter()
        .map(|&h| born_sharp(b.charge, b.radius, h, b.pad, &cfg.params, cfg.coupling.pb))
        .collect::<vism::Result<Vec<_>>>()?;
    let mut csv = String::from("h energy analytic rel_error\n");
    for r in &runs {
        csv.push_str(&format!("{} {:.12e} {:.12e} {:.6e}\n", r.h, r.energy, r.analytic, r.rel_error));
    }
    let errors: Vec<f64> = runs.iter().map(|r| (r.energy - r.analytic).abs()).collect();
    let order = match richardson_order(&b.h_values, &errors) {
        Ok(o) => Some(o),
        Err(e) => {
            log::warn!("no convergence order: {e}");
            None
        }
    };
    let out = cfg.out_dir();
    write_atomic(&out.join("born.csv"), csv.as_bytes())?;
    write_json(&out.join("born.json"), &json!({ "runs": runs, "order": order }))?;
    print!("{csv}");
    if let Some(o) = order {
        println!("observed order {o:.3}");
    }
    if runs.iter().any(|r| !r.energy.is_finite()) {
        bail!("non-finite Born energy");
    }
    Ok(true)
}
