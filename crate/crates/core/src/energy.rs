//! Discrete solvation free energy and its decomposition.
//!
//! Nonpolar part: `γ Σ|∇u|^q h³ + P_h Σ u^p h³ + ρ_s Σ (1-u^p) U^vdW h³`.
//! Polar part: the electrostatic functional
//! `Σ qψ - Σ_faces ε_f (Δψ)² h/(8πk_e) - h³ Σ (q_k - u^p) B(ψ)` evaluated at the
//! solvated potential, minus the same functional for the charges in a uniform
//! solute dielectric without ions. Both carry the far-field flux term
//! `½ Σ_boundary ψ_b · flux_b` so that the salt-free polar energy reduces to
//! `½ Σ q (ψ - ψ_ref)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Region;
use crate::error::{Error, Result};
use crate::evolution::InterfaceField;
use crate::grid::{gradient_sq, ScalarField};
use crate::molecule::Molecule;
use crate::pb::{det_sum, face_dielectrics, field_scale, PbProblem};
use crate::physics::PhysicalParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub tv: f64,
    pub pressure_volume: f64,
    pub vdw: f64,
    pub fixed_charge: f64,
    pub dielectric: f64,
    pub ionic: f64,
}

/// Energies in kcal/mol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub repulsive: f64,
    pub attractive: f64,
    pub polar: f64,
    pub total: f64,
    pub breakdown: EnergyBreakdown,
}

impl EnergyReport {
    pub fn from_breakdown(b: EnergyBreakdown) -> Self {
        let repulsive = b.tv + b.pressure_volume;
        let attractive = b.vdw;
        let polar = b.fixed_charge + b.dielectric + b.ionic;
        Self {
            repulsive,
            attractive,
            polar,
            total: repulsive + attractive + polar,
            breakdown: b,
        }
    }

    pub fn nonpolar(&self) -> f64 {
        self.repulsive + self.attractive
    }
}

/// `Σ |∇u|^q h³` with central differences (one-sided on the box faces).
pub fn tv_integral(u: &ScalarField, q: f64) -> f64 {
    let grid = *u.grid();
    let v = u.values();
    let h3 = grid.cell_volume();
    det_sum((0..grid.len()).into_par_iter().map(|i| {
        let g = gradient_sq(v, &grid, i);
        if g > 0.0 {
            g.powf(0.5 * q) * h3
        } else {
            0.0
        }
    }))
}

/// `Σ u^p h³`.
pub fn volume_integral(u: &ScalarField, p: f64) -> f64 {
    let h3 = u.grid().cell_volume();
    det_sum(u.values().par_iter().map(|&x| x.clamp(0.0, 1.0).powf(p) * h3))
}

/// `Σ (1 - u^p) U h³` over nodes outside the pure solute.
pub fn solvent_weighted_integral(field: &InterfaceField, vdw: &ScalarField, p: f64) -> f64 {
    let h3 = field.grid().cell_volume();
    let regions = field.masks().regions();
    let u = field.values();
    let w = vdw.values();
    det_sum((0..u.len()).into_par_iter().map(|i| {
        if regions[i] == Region::Solute {
            return 0.0;
        }
        let s = 1.0 - u[i].clamp(0.0, 1.0).powf(p);
        if s > 0.0 {
            s * w[i] * h3
        } else {
            0.0
        }
    }))
}

/// Nonpolar terms: (tv, pressure_volume, vdw) already multiplied by γ, P_h, ρ_s.
pub fn nonpolar_energy(field: &InterfaceField, vdw: &ScalarField, params: &PhysicalParams) -> Result<EnergyBreakdown> {
    if vdw.grid() != field.grid() {
        return Err(Error::Input("vdW field uses a different grid".into()));
    }
    let p = params.p();
    Ok(EnergyBreakdown {
        tv: params.gamma * tv_integral(field.u(), params.q_k),
        pressure_volume: params.pressure * volume_integral(field.u(), p),
        vdw: params.solvent_density * solvent_weighted_integral(field, vdw, p),
        ..EnergyBreakdown::default()
    })
}

/// Electrostatic functional split into its three terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolarTerms {
    pub fixed_charge: f64,
    pub dielectric: f64,
    pub ionic: f64,
}

impl PolarTerms {
    pub fn total(&self) -> f64 {
        self.fixed_charge + self.dielectric + self.ionic
    }

    fn minus(&self, other: &PolarTerms) -> PolarTerms {
        PolarTerms {
            fixed_charge: self.fixed_charge - other.fixed_charge,
            dielectric: self.dielectric - other.dielectric,
            ionic: self.ionic - other.ionic,
        }
    }
}

/// The discrete electrostatic functional of `psi` (plus the far-field flux
/// term) with the given face dielectrics and ion accessibility from `u`.
pub fn electrostatic_functional(problem: &PbProblem, face: &[Vec<f64>; 3], u: &ScalarField, psi: &ScalarField) -> PolarTerms {
    let grid = *problem.grid();
    let params = problem.params();
    let h = grid.spacing();
    let h3 = grid.cell_volume();
    let scale = field_scale(params);
    let strides = grid.strides();
    let dims = grid.dims();
    let pv = psi.values();
    let uv = u.values();
    let q = problem.charges().values();
    let p = params.p();
    let q_k = params.q_k;
    let ions = &params.ions;

    let fixed_charge = det_sum(q.par_iter().zip(pv).map(|(a, b)| a * b));
    let field_energy = det_sum((0..grid.len()).into_par_iter().map(|i| {
        let c = grid.coords(i);
        let mut acc = 0.0;
        for a in 0..3 {
            if c[a] + 1 < dims[a] {
                let d = pv[i + strides[a]] - pv[i];
                acc += face[a][i] * d * d;
            }
        }
        acc * h / (2.0 * scale)
    }));
    let far_field = det_sum((0..grid.len()).into_par_iter().map(|i| {
        if !grid.is_boundary_index(i) {
            return 0.0;
        }
        let c = grid.coords(i);
        let mut flux = 0.0;
        for a in 0..3 {
            let s = strides[a];
            if c[a] + 1 < dims[a] {
                flux += face[a][i] * (pv[i] - pv[i + s]);
            }
            if c[a] > 0 {
                flux += face[a][i - s] * (pv[i] - pv[i - s]);
            }
        }
        0.5 * pv[i] * flux * h / scale
    }));
    let ionic = if ions.is_empty() {
        0.0
    } else {
        -det_sum((0..grid.len()).into_par_iter().map(|i| {
            (q_k - uv[i].clamp(0.0, 1.0).powf(p)) * ions.b(pv[i]) * h3
        }))
    };
    PolarTerms {
        fixed_charge,
        dielectric: far_field - field_energy,
        ionic,
    }
}

/// Potential and functional value of the vacuum reference state.
#[derive(Debug, Clone)]
pub struct Reference {
    pub psi: ScalarField,
    pub terms: PolarTerms,
}

/// Solvated problem plus its cached vacuum reference.
#[derive(Debug, Clone)]
pub struct Electrostatics {
    problem: PbProblem,
    reference: Reference,
}

impl Electrostatics {
    pub fn new(problem: PbProblem, molecule: &Molecule) -> Result<Self> {
        let vacuum = problem.vacuum(molecule)?;
        let ones = ScalarField::constant(*problem.grid(), 1.0);
        let sol = vacuum.solve(&ones, None)?;
        let face = face_dielectrics(&ones, vacuum.params());
        let terms = electrostatic_functional(&vacuum, &face, &ones, &sol.psi);
        Ok(Self {
            problem,
            reference: Reference { psi: sol.psi, terms },
        })
    }

    pub fn problem(&self) -> &PbProblem {
        &self.problem
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    /// Polar energy terms of `psi` for interface `u`. Fails with a
    /// stale-potential error when `psi` does not solve the equation for `u`
    /// to `residual_tol`.
    pub fn polar_energy(&self, u: &ScalarField, psi: &ScalarField, residual_tol: f64) -> Result<PolarTerms> {
        let residual = self.problem.residual(u, psi)?;
        if !(residual <= residual_tol) {
            return Err(Error::StalePotential {
                residual,
                tolerance: residual_tol,
            });
        }
        let face = face_dielectrics(u, self.problem.params());
        Ok(electrostatic_functional(&self.problem, &face, u, psi).minus(&self.reference.terms))
    }

    /// Same as [`Electrostatics::polar_energy`] with explicit face
    /// dielectrics and no residual check.
    pub fn polar_energy_with_faces(&self, face: &[Vec<f64>; 3], u: &ScalarField, psi: &ScalarField) -> PolarTerms {
        electrostatic_functional(&self.problem, face, u, psi).minus(&self.reference.terms)
    }
}

/// Full report from nonpolar fields and optional polar terms.
pub fn total_energy(
    field: &InterfaceField,
    vdw: &ScalarField,
    params: &PhysicalParams,
    polar: Option<PolarTerms>,
) -> Result<EnergyReport> {
    let mut b = nonpolar_energy(field, vdw, params)?;
    if let Some(p) = polar {
        b.fixed_charge = p.fixed_charge;
        b.dielectric = p.dielectric;
        b.ionic = p.ionic;
    }
    Ok(EnergyReport::from_breakdown(b))
}
