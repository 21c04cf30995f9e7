//! Self-consistent iteration between the potential and the interface.
//!
//! Each outer cycle solves the potential for the current `u` (warm-started),
//! records the energy, relaxes ψ, evolves `u` for a fixed number of steps under
//! the resulting normal-velocity potential and relaxes `u`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{classify_domains, DomainMasks};
use crate::energy::{total_energy, Electrostatics, EnergyReport, PolarTerms};
use crate::error::{Error, Result};
use crate::evolution::{evolve_steps, Drive, EvolutionConfig, InitProfile, InterfaceField};
use crate::grid::{build_grid, Grid, GridSpec, ScalarField};
use crate::molecule::Molecule;
use crate::pb::{PbConfig, PbProblem, PotentialField};
use crate::physics::{vdw_field, PhysicalParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    /// Relaxation weight for `u`.
    pub alpha: f64,
    /// Relaxation weight for ψ.
    pub alpha_prime: f64,
    /// Relative energy change between outer cycles that counts as converged.
    pub outer_tol: f64,
    /// Largest max|Δu| of the last relaxation still accepted as converged.
    pub du_guard: f64,
    pub max_outer: usize,
    pub warm_start_nonpolar: bool,
    /// The warm start stops once a chunk of `steps_per_coupling` steps lowers
    /// the energy by less than this fraction.
    pub warm_stall_tol: f64,
    /// Skip the potential entirely (electrostatics off).
    pub nonpolar_only: bool,
    pub init: InitProfile,
    pub grid: GridSpec,
    pub pb: PbConfig,
    /// Residual above which a potential is treated as stale in the energy.
    pub residual_tol: f64,
    /// Relative slack for counting energy increases between outer cycles.
    pub increase_slack: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            alpha_prime: 0.5,
            outer_tol: 1e-5,
            du_guard: 1e-2,
            max_outer: 200,
            warm_start_nonpolar: true,
            warm_stall_tol: 1e-9,
            nonpolar_only: false,
            init: InitProfile::Ramp,
            grid: GridSpec::default(),
            pb: PbConfig::default(),
            residual_tol: 1e-4,
            increase_slack: 1e-6,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("alpha_prime", self.alpha_prime)] {
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {w}")));
            }
        }
        if !(self.outer_tol > 0.0) || !(self.du_guard > 0.0) || !(self.residual_tol > 0.0) || !(self.warm_stall_tol >= 0.0) {
            return Err(Error::Config("coupling tolerances must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be positive".into()));
        }
        if !(self.grid.h > 0.0) || !(self.grid.pad >= 0.0) {
            return Err(Error::Config("grid spacing must be positive and padding non-negative".into()));
        }
        self.pb.validate()
    }
}

/// One row of the outer-iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub total_energy: f64,
    /// max|Δu| of the relaxation that produced this iterate (0 for the first).
    pub max_du: f64,
    pub pb_residual: f64,
}

/// Progress notifications for logging and invariant checks.
#[derive(Debug)]
pub enum Event<'a> {
    /// An accepted evolution step (`outer` is 0 during the nonpolar warm start).
    EvolutionStep {
        outer: usize,
        field: &'a InterfaceField,
        energy: f64,
    },
    /// The interface right after a relaxation blend.
    Blend { outer: usize, field: &'a InterfaceField },
    Outer(&'a TraceRow),
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub u: InterfaceField,
    /// `None` in nonpolar mode.
    pub psi: Option<PotentialField>,
    pub report: EnergyReport,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Outer cycles whose energy rose by more than the increase slack.
    pub energy_increases: usize,
    /// Evolution steps accepted with an energy increase at the time-step floor.
    pub evolution_violations: usize,
    pub evolution_steps: usize,
}

impl Solution {
    pub fn outer_iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Everything about a molecule that does not depend on `u`: grid, masks,
/// dispersion field and (unless nonpolar) the potential problem.
#[derive(Debug, Clone)]
pub struct SolvationSystem {
    molecule: Molecule,
    params: PhysicalParams,
    masks: Arc<DomainMasks>,
    vdw: ScalarField,
    electrostatics: Option<Electrostatics>,
}

impl SolvationSystem {
    pub fn new(molecule: &Molecule, params: &PhysicalParams, cfg: &CouplingConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = build_grid(molecule, cfg.grid.h, params.probe_radius, cfg.grid.pad)?;
        Self::on_grid(molecule, params, &grid, cfg)
    }

    pub fn on_grid(molecule: &Molecule, params: &PhysicalParams, grid: &Grid, cfg: &CouplingConfig) -> Result<Self> {
        params.validate()?;
        params.lj.check_covers(molecule)?;
        let masks = Arc::new(classify_domains(molecule, params.probe_radius, grid)?);
        let vdw = vdw_field(molecule, &params.lj, grid)?;
        let electrostatics = if cfg.nonpolar_only {
            None
        } else {
            let problem = PbProblem::new(molecule, grid, params, cfg.pb)?;
            Some(Electrostatics::new(problem, molecule)?)
        };
        Ok(Self {
            molecule: molecule.clone(),
            params: params.clone(),
            masks,
            vdw,
            electrostatics,
        })
    }

    pub fn molecule(&self) -> &Molecule {
        &self.molecule
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        self.masks.grid()
    }

    pub fn masks(&self) -> &Arc<DomainMasks> {
        &self.masks
    }

    pub fn vdw(&self) -> &ScalarField {
        &self.vdw
    }

    pub fn electrostatics(&self) -> Option<&Electrostatics> {
        self.electrostatics.as_ref()
    }

    pub fn initial_field(&self, profile: InitProfile) -> Result<InterfaceField> {
        InterfaceField::initialize(&self.molecule, self.masks.clone(), self.params.probe_radius, profile)
    }
}

/// Where the iteration starts.
#[derive(Debug, Clone)]
pub enum Start {
    Profile(InitProfile),
    /// Restart from given fields (no warm start).
    Fields { u: ScalarField, psi: Option<ScalarField> },
}

/// Builds the system with default grid settings and solves it.
pub fn self_consistent_solve(
    molecule: &Molecule,
    params: &PhysicalParams,
    cfg: &CouplingConfig,
    evo: &EvolutionConfig,
) -> Result<Solution> {
    let sys = SolvationSystem::new(molecule, params, cfg)?;
    solve_system(&sys, cfg, evo, Start::Profile(cfg.init), &mut |_| {})
}

pub fn solve_system(
    sys: &SolvationSystem,
    cfg: &CouplingConfig,
    evo: &EvolutionConfig,
    start: Start,
    observer: &mut dyn FnMut(Event),
) -> Result<Solution> {
    cfg.validate()?;
    evo.validate()?;
    let params = &sys.params;
    let v0 = Drive::new(None, &sys.vdw, params)?;
    let mut evolution_steps = 0;
    let mut evolution_violations = 0;

    let (mut field, mut psi_relaxed, warm) = match start {
        Start::Profile(p) => (sys.initial_field(p)?, None, cfg.warm_start_nonpolar),
        Start::Fields { u, psi } => {
            if u.grid() != sys.grid() {
                return Err(Error::Input("restart field uses a different grid".into()));
            }
            (InterfaceField::new(u, sys.masks.clone())?, psi, false)
        }
    };

    if warm {
        // Relax in chunks; stop on convergence or once a chunk no longer
        // lowers the energy measurably (explicit steps can settle into a tiny
        // limit cycle at degenerate nodes and never meet the |Δu| tolerance).
        let mut prev = f64::INFINITY;
        while evolution_steps < evo.max_total_steps {
            let chunk = evo.steps_per_coupling.min(evo.max_total_steps - evolution_steps);
            let out = evolve_steps(field, &v0, evo, params, chunk, &mut |f, e| {
                observer(Event::EvolutionStep { outer: 0, field: f, energy: e })
            })?;
            evolution_steps += out.steps;
            evolution_violations += out.violations;
            field = out.field;
            let stalled = prev - out.energy <= cfg.warm_stall_tol * out.energy.abs().max(1.0);
            prev = out.energy;
            if out.converged || stalled {
                break;
            }
        }
    }

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut energy_increases = 0;
    let mut last_du = 0.0;
    let mut converged = false;
    let mut report;
    let mut psi_out: Option<PotentialField>;

    let mut outer = 0;
    loop {
        outer += 1;
        // potential for the current interface
        let (polar, fresh) = match &sys.electrostatics {
            Some(es) => {
                let sol = es
                    .problem()
                    .solve(field.u(), psi_relaxed.as_ref())
                    .map_err(|e| with_context(e, outer))?;
                let terms = es
                    .polar_energy(field.u(), &sol.psi, cfg.residual_tol)
                    .map_err(|e| with_context(e, outer))?;
                (terms, Some(sol))
            }
            None => (PolarTerms::default(), None),
        };
        report = total_energy(&field, &sys.vdw, params, Some(polar))?;
        let row = TraceRow {
            outer_iter: outer,
            total_energy: report.total,
            max_du: last_du,
            pb_residual: fresh.as_ref().map_or(0.0, |s| s.residual),
        };
        log::debug!(
            "{} {:.10e} {:.3e} {:.3e}",
            row.outer_iter,
            row.total_energy,
            row.max_du,
            row.pb_residual
        );
        if let Some(prev) = trace.last() {
            if report.total > prev.total_energy + cfg.increase_slack * prev.total_energy.abs() {
                energy_increases += 1;
                log::warn!(
                    "outer iteration {outer}: energy rose from {:.8} to {:.8}",
                    prev.total_energy,
                    report.total
                );
            }
        }
        observer(Event::Outer(&row));
        let done = trace.last().is_some_and(|prev| {
            (report.total - prev.total_energy).abs() <= cfg.outer_tol * report.total.abs().max(f64::MIN_POSITIVE)
                && last_du <= cfg.du_guard
        });
        trace.push(row);

        // relax the potential
        psi_relaxed = match (&fresh, psi_relaxed.take()) {
            (Some(sol), Some(mut old)) => {
                old.blend_from(&sol.psi, cfg.alpha_prime);
                Some(old)
            }
            (Some(sol), _) => Some(sol.psi.clone()),
            (None, _) => None,
        };
        psi_out = fresh;

        if done {
            converged = true;
            break;
        }
        if outer >= cfg.max_outer {
            break;
        }

        // evolve under the relaxed potential, then relax u
        let v = match &psi_relaxed {
            Some(psi) => Drive::new(Some(psi), &sys.vdw, params)?,
            None => v0.clone(),
        };
        let out = evolve_steps(field.clone(), &v, evo, params, evo.steps_per_coupling, &mut |f, e| {
            observer(Event::EvolutionStep { outer, field: f, energy: e })
        })?;
        evolution_steps += out.steps;
        evolution_violations += out.violations;
        let before = field.clone();
        field.blend_from(&out.field, cfg.alpha);
        last_du = before.u().max_abs_diff(field.u());
        observer(Event::Blend { outer, field: &field });
    }

    Ok(Solution {
        u: field,
        psi: psi_out,
        report,
        trace,
        converged,
        energy_increases,
        evolution_violations,
        evolution_steps,
    })
}

fn with_context(e: Error, outer: usize) -> Error {
    match e {
        Error::Solver { message, residuals } => Error::Solver {
            message: format!("outer iteration {outer}: {message}"),
            residuals,
        },
        Error::Numerical(m) => Error::Numerical(format!("outer iteration {outer}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::Atom;

    fn diatomic(q: f64) -> Molecule {
        Molecule::new(vec![
            Atom::new([-1.0, 0.0, 0.0], q, 1.7, "C"),
            Atom::new([1.0, 0.0, 0.0], -q, 1.5, "C"),
        ])
        .unwrap()
    }

    fn quick() -> (CouplingConfig, EvolutionConfig) {
        let cfg = CouplingConfig {
            grid: GridSpec { h: 0.5, pad: 3.0 },
            ..CouplingConfig::default()
        };
        let evo = EvolutionConfig {
            max_total_steps: 2000,
            ..EvolutionConfig::default()
        };
        (cfg, evo)
    }

    #[test]
    fn config_validation() {
        let mut c = CouplingConfig::default();
        c.validate().unwrap();
        c.alpha = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn neutral_molecule_matches_nonpolar_mode() {
        let mol = diatomic(0.0);
        let params = PhysicalParams::default();
        let (cfg, evo) = quick();
        let polar = self_consistent_solve(&mol, &params, &cfg, &evo).unwrap();
        let np_cfg = CouplingConfig { nonpolar_only: true, ..cfg };
        let nonpolar = self_consistent_solve(&mol, &params, &np_cfg, &evo).unwrap();
        assert!(polar.converged && nonpolar.converged);
        assert_eq!(polar.report.polar, 0.0);
        assert!(nonpolar.psi.is_none());
        assert_eq!(polar.report.total, nonpolar.report.total);
        assert_eq!(polar.u, nonpolar.u);
    }

    #[test]
    fn restart_reconverges_quickly() {
        let mol = diatomic(0.4);
        let params = PhysicalParams::default();
        let (cfg, evo) = quick();
        let sys = SolvationSystem::new(&mol, &params, &cfg).unwrap();
        let first = solve_system(&sys, &cfg, &evo, Start::Profile(InitProfile::Ramp), &mut |_| {}).unwrap();
        assert!(first.converged);
        let restart = Start::Fields {
            u: first.u.u().clone(),
            psi: first.psi.as_ref().map(|p| p.psi.clone()),
        };
        let second = solve_system(&sys, &cfg, &evo, restart, &mut |_| {}).unwrap();
        assert!(second.converged);
        assert!(second.outer_iterations() <= 2, "{}", second.outer_iterations());
    }

    #[test]
    fn runs_are_bit_identical() {
        let mol = diatomic(0.3);
        let params = PhysicalParams::default();
        let (mut cfg, evo) = quick();
        cfg.max_outer = 5;
        let a = self_consistent_solve(&mol, &params, &cfg, &evo).unwrap();
        let b = self_consistent_solve(&mol, &params, &cfg, &evo).unwrap();
        assert_eq!(a.trace, b.trace);
    }
}
