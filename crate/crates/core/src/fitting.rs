//! Parameter fitting against experimental solvation energies.
//!
//! With `u` and ψ frozen the total energy is affine in (γ, P_h, ε per type
//! tag), so each round solves every molecule with the current parameters,
//! builds one design row per molecule and updates the parameters by
//! non-negative least squares. Rounds repeat until the parameters settle.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{solve_system, CouplingConfig, Solution, SolvationSystem, Start};
use crate::energy::{solvent_weighted_integral, tv_integral, volume_integral};
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::molecule::Molecule;
use crate::nnls::nnls;
use crate::physics::{vdw_field_unit_eps, PhysicalParams};

#[derive(Debug, Clone, PartialEq)]
pub struct FitEntry {
    pub name: String,
    pub molecule: Molecule,
    /// Experimental solvation free energy, kcal/mol.
    pub experimental: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDataset {
    pub entries: Vec<FitEntry>,
    /// Solve without electrostatics (data set of nonpolar molecules).
    pub nonpolar: bool,
}

impl FitDataset {
    /// Sorted type tags over all molecules.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.entries.iter().flat_map(|e| e.molecule.type_tags()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Number of fitted parameters: γ, P_h and one well depth per tag.
    pub fn parameter_count(&self) -> usize {
        2 + self.tags().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Fit("empty data set".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.experimental.is_finite()) {
            return Err(Error::Fit(format!("{}: experimental value is not finite", e.name)));
        }
        let n = self.parameter_count();
        if self.entries.len() < n {
            return Err(Error::Fit(format!(
                "{} molecules cannot determine {n} parameters",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// The fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameters {
    pub gamma: f64,
    pub pressure: f64,
    /// Lennard-Jones well depth per type tag.
    pub eps: BTreeMap<String, f64>,
}

impl FitParameters {
    /// Current values of `params` for the given tags.
    pub fn from_params(params: &PhysicalParams, tags: &[String]) -> Result<Self> {
        let eps = tags
            .iter()
            .map(|t| Ok((t.clone(), params.lj.lookup(t)?.eps)))
            .collect::<Result<_>>()?;
        Ok(Self {
            gamma: params.gamma,
            pressure: params.pressure,
            eps,
        })
    }

    /// `params` with these values substituted.
    pub fn apply(&self, params: &PhysicalParams) -> Result<PhysicalParams> {
        let mut out = params.clone();
        out.gamma = self.gamma;
        out.pressure = self.pressure;
        for (t, &e) in &self.eps {
            out.lj.set_eps(t, e)?;
        }
        Ok(out)
    }

    /// Ordered as (γ, P_h, ε in tag order).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.gamma, self.pressure];
        v.extend(self.eps.values());
        v
    }

    fn with_values(&self, x: &[f64]) -> Self {
        Self {
            gamma: x[0],
            pressure: x[1],
            eps: self.eps.keys().cloned().zip(x[2..].iter().copied()).collect(),
        }
    }
}

/// Linear model of one molecule's energy at frozen fields:
/// `ΔG = a_tv γ + a_vol P_h + Σ a_eps[t] ε_t + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub a_tv: f64,
    pub a_vol: f64,
    pub a_eps: BTreeMap<String, f64>,
    /// Polar energy; no other term is independent of the fitted parameters.
    pub offset: f64,
}

impl DesignRow {
    /// Coefficients in [`FitParameters::to_vec`] order for `tags`.
    pub fn coefficients(&self, tags: &[String]) -> Vec<f64> {
        let mut v = vec![self.a_tv, self.a_vol];
        v.extend(tags.iter().map(|t| self.a_eps.get(t).copied().unwrap_or(0.0)));
        v
    }

    pub fn predict(&self, theta: &FitParameters) -> f64 {
        let tags: Vec<String> = theta.eps.keys().cloned().collect();
        let c = self.coefficients(&tags);
        c.iter().zip(theta.to_vec()).map(|(a, t)| a * t).sum::<f64>() + self.offset
    }
}

/// Design row of a converged solution on `sys`, for the given tags.
pub fn energy_design_row(solution: &Solution, sys: &SolvationSystem, tags: &[String]) -> Result<DesignRow> {
    if !solution.converged {
        return Err(Error::Fit("design row requested for an unconverged solution".into()));
    }
    let params = sys.params();
    let p = params.p();
    let u = solution.u.u();
    let mut a_eps = BTreeMap::new();
    for t in tags {
        let coef = if sys.molecule().atoms().iter().any(|a| &a.type_tag == t) {
            let unit = vdw_field_unit_eps(sys.molecule(), &params.lj, sys.grid(), t)?;
            params.solvent_density * solvent_weighted_integral(&solution.u, &unit, p)
        } else {
            0.0
        };
        a_eps.insert(t.clone(), coef);
    }
    Ok(DesignRow {
        a_tv: tv_integral(u, params.q_k),
        a_vol: volume_integral(u, p),
        a_eps,
        offset: solution.report.polar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Stop once every parameter changes by less than this, relative.
    pub param_tol: f64,
    pub max_fit_iters: usize,
    /// Allowed RMS rise between rounds before it counts as an increase.
    pub rms_noise: f64,
    /// Consecutive RMS increases that abort the fit.
    pub max_rms_increases: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            param_tol: 1e-3,
            max_fit_iters: 30,
            rms_noise: 1e-4,
            max_rms_increases: 3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.param_tol > 0.0) || self.max_fit_iters == 0 || !(self.rms_noise >= 0.0) {
            return Err(Error::Config("invalid fit tolerances".into()));
        }
        Ok(())
    }
}

/// Progress of a fit.
#[derive(Debug, Clone)]
pub struct FitState {
    pub params: FitParameters,
    pub iterations: usize,
    /// RMS error of the solved energies at the start of each round.
    pub rms_history: Vec<f64>,
    /// Parameters after each round.
    pub history: Vec<FitParameters>,
    /// RMS of the frozen-field model at the final parameters.
    pub rms: f64,
    pub converged: bool,
    /// Entries dropped in the last round, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Last solution per entry (`None` if it failed).
    pub solutions: Vec<Option<Solution>>,
}

impl FitState {
    pub fn new(params: FitParameters) -> Self {
        Self {
            params,
            iterations: 0,
            rms_history: Vec::new(),
            history: Vec::new(),
            rms: f64::NAN,
            converged: false,
            excluded: Vec::new(),
            solutions: Vec::new(),
        }
    }
}

/// Alternates field solves and non-negative least squares updates.
pub fn fit_parameters(
    dataset: &FitDataset,
    init: FitState,
    params: &PhysicalParams,
    coupling: &CouplingConfig,
    evo: &EvolutionConfig,
    cfg: &FitConfig,
) -> Result<FitState> {
    dataset.validate()?;
    cfg.validate()?;
    let tags = dataset.tags();
    if init.params.eps.keys().ne(tags.iter()) {
        return Err(Error::Fit(format!(
            "initial parameters cover tags {:?}, data set has {:?}",
            init.params.eps.keys().collect::<Vec<_>>(),
            tags
        )));
    }
    let coupling = CouplingConfig {
        nonpolar_only: coupling.nonpolar_only || dataset.nonpolar,
        ..*coupling
    };
    let n = tags.len() + 2;
    let mut state = init;
    if state.solutions.len() != dataset.entries.len() {
        state.solutions = vec![None; dataset.entries.len()];
    }
    let mut rising = 0;

    while state.iterations < cfg.max_fit_iters {
        state.iterations += 1;
        let current = state.params.apply(params)?;

        // Every round starts from scratch: restarting from the previous
        // fields stops as soon as the energy settles, before the interface
        // has followed the new parameters, and biases the fit.
        let results: Vec<Result<(DesignRow, Solution)>> = dataset
            .entries
            .par_iter()
            .map(|entry| {
                let sys = SolvationSystem::new(&entry.molecule, &current, &coupling)?;
                let sol = solve_system(&sys, &coupling, evo, Start::Profile(coupling.init), &mut |_| {})?;
                if !sol.converged {
                    return Err(Error::Fit("field solve did not converge".into()));
                }
                Ok((energy_design_row(&sol, &sys, &tags)?, sol))
            })
            .collect();

        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut sq = 0.0;
        state.excluded.clear();
        for (k, (entry, r)) in dataset.entries.iter().zip(results).enumerate() {
            match r {
                Ok((row, sol)) => {
                    sq += (sol.report.total - entry.experimental).powi(2);
                    targets.push(entry.experimental - row.offset);
                    rows.push(row.coefficients(&tags));
                    state.solutions[k] = Some(sol);
                }
                Err(e) => {
                    log::warn!("fit round {}: excluding {}: {e}", state.iterations, entry.name);
                    state.excluded.push((entry.name.clone(), e.to_string()));
                    state.solutions[k] = None;
                }
            }
        }
        if rows.len() < n {
            return Err(Error::Fit(format!(
                "only {} of {} molecules usable for {n} parameters; excluded: {:?}",
                rows.len(),
                dataset.entries.len(),
                state.excluded
            )));
        }
        let rms = (sq / rows.len() as f64).sqrt();
        if let Some(&prev) = state.rms_history.last() {
            if rms > prev + cfg.rms_noise {
                rising += 1;
                if rising >= cfg.max_rms_increases {
                    return Err(Error::Fit(format!(
                        "RMS rose in {rising} consecutive rounds: {:?}",
                        state.rms_history
                    )));
                }
            } else {
                rising = 0;
            }
        }
        state.rms_history.push(rms);

        let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        let b = DVector::from_vec(targets);
        let sol = nnls(&a, &b)?;
        let old = state.params.to_vec();
        let new = sol.x.as_slice();
        let settled = old
            .iter()
            .zip(new)
            .all(|(o, x)| (x - o).abs() <= cfg.param_tol * o.abs().max(x.abs()).max(1e-12));
        state.params = state.params.with_values(new);
        state.history.push(state.params.clone());
        state.rms = sol.residual_norm / (rows.len() as f64).sqrt();
        log::info!(
            "fit round {}: rms {:.6} -> {:.6}, params {:?}",
            state.iterations,
            rms,
            state.rms,
            new
        );
        if settled {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}
