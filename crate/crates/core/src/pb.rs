//! Finite-difference solver for the perturbed Poisson-Boltzmann equation
//!
//! ```text
//! div(eps(u) grad psi) - (q_k - u^p) B'(psi) = -rho_m   in the box,
//! psi = psi_inf                                       on the box faces.
//! ```
//!
//! Dielectric values are relative; the 4π k_e factor that turns them into
//! absolute permittivities in kcal/mol units is carried on the source and
//! ionic terms. The 7-point stencil is stored in matrix form
//! `A psi = b` with a positive diagonal and non-positive couplings:
//!
//! ```text
//! sum_f eps_f (psi_i - psi_j) + 4π k_e h² (q_k - u_i^p) B'(psi_i) = 4π k_e q_i / h
//! ```
//!
//! where `eps_f` is the mixture dielectric at the mean of `u` across face `f`
//! and `q_i` the trilinearly spread charge at node `i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::molecule::{distance, Molecule};
use crate::physics::{Ions, PhysicalParams};

const CHUNK: usize = 4096;

/// `4π k_e`: converts relative dielectric constants to absolute ones.
#[inline]
pub fn field_scale(params: &PhysicalParams) -> f64 {
    4.0 * std::f64::consts::PI * params.coulomb
}

/// Fractional node charges (e per node).
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeGrid {
    field: ScalarField,
}

impl ChargeGrid {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn total(&self) -> f64 {
        self.field.values().iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.field.values().iter().all(|&q| q == 0.0)
    }
}

/// Distributes each atom's charge over the 8 corners of its cell with
/// trilinear weights.
pub fn spread_charges(molecule: &Molecule, grid: &Grid) -> Result<ChargeGrid> {
    let mut field = ScalarField::zeros(*grid);
    let dims = grid.dims();
    let strides = grid.strides();
    for (n, atom) in molecule.atoms().iter().enumerate() {
        let (cell, frac) = grid
            .locate(atom.position)
            .ok_or_else(|| Error::Input(format!("atom {n} lies outside the grid")))?;
        if (0..3).any(|a| cell[a] == 0 || cell[a] + 2 >= dims[a]) {
            return Err(Error::Input(format!(
                "atom {n} is too close to the grid boundary to spread its charge"
            )));
        }
        let base = grid.index(cell[0], cell[1], cell[2]);
        let values = field.values_mut();
        for corner in 0..8usize {
            let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..3 {
                w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += bits[a] * strides[a];
            }
            values[idx] += w * atom.charge;
        }
    }
    Ok(ChargeGrid { field })
}

/// Screened Coulomb sum `Σ k_e q_i exp(-κ r_i) / (eps r_i)`.
pub fn screened_coulomb(molecule: &Molecule, x: [f64; 3], coulomb: f64, eps: f64, kappa: f64) -> Result<f64> {
    let mut psi = 0.0;
    for atom in molecule.atoms() {
        let r = distance(x, atom.position);
        if !(r > 0.0) {
            return Err(Error::Domain(
                "boundary potential requested at an atom center".into(),
            ));
        }
        psi += coulomb * atom.charge * (-kappa * r).exp() / (eps * r);
    }
    Ok(psi)
}

/// Dirichlet value at `x`: superposed Debye-Hückel potentials of the atoms in
/// bulk solvent.
pub fn boundary_potential(molecule: &Molecule, x: [f64; 3], params: &PhysicalParams) -> Result<f64> {
    screened_coulomb(molecule, x, params.coulomb, params.eps_s, params.debye_kappa())
}

/// Krylov and Newton controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbConfig {
    /// Relative residual target for the linear and nonlinear iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub max_newton: usize,
    /// Abort when |psi| exceeds this anywhere (kcal/(mol·e)).
    pub psi_bound: f64,
}

impl Default for PbConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
            max_newton: 50,
            psi_bound: 1e7,
        }
    }
}

impl PbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("pb tolerance must be in (0, 1), got {}", self.tol)));
        }
        if self.max_iter == 0 || self.max_newton == 0 {
            return Err(Error::Config("pb iteration limits must be positive".into()));
        }
        if !(self.psi_bound > 0.0) {
            return Err(Error::Config("psi bound must be positive".into()));
        }
        Ok(())
    }
}

/// Assembled 7-point system. Boundary rows are identities carrying the
/// Dirichlet value; interior rows have any boundary coupling moved to `rhs`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    grid: Grid,
    /// `face[a][idx]`: dielectric on the face between `idx` and `idx + stride[a]`.
    face: [Vec<f64>; 3],
    diag: Vec<f64>,
    rhs: Vec<f64>,
    dirichlet: Vec<bool>,
}

impl LinearSystem {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn is_dirichlet(&self, idx: usize) -> bool {
        self.dirichlet[idx]
    }

    /// Face dielectric between `idx` and its +axis neighbor.
    pub fn face_dielectric(&self, axis: usize, idx: usize) -> f64 {
        self.face[axis][idx]
    }

    /// Matrix entry `A[i][j]` of the interior block (0 for non-neighbors).
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let strides = self.grid.strides();
        for a in 0..3 {
            let s = strides[a];
            if j == i + s && self.neighbor(i, a, true).is_some() {
                return -self.face[a][i];
            }
            if i >= s && j == i - s && self.neighbor(i, a, false).is_some() {
                return -self.face[a][j];
            }
        }
        0.0
    }

    #[inline]
    fn neighbor(&self, idx: usize, axis: usize, plus: bool) -> Option<usize> {
        let c = self.grid.coords(idx);
        let s = self.grid.strides()[axis];
        if plus {
            (c[axis] + 1 < self.grid.dims()[axis]).then(|| idx + s)
        } else {
            (c[axis] > 0).then(|| idx - s)
        }
    }

    /// Interior-block product `y = A_II x` for `x` vanishing on Dirichlet nodes.
    fn apply_interior(&self, x: &[f64], y: &mut [f64]) {
        let strides = self.grid.strides();
        y.par_iter_mut().enumerate().for_each(|(idx, yi)| {
            if self.dirichlet[idx] {
                *yi = 0.0;
                return;
            }
            let mut acc = self.diag[idx] * x[idx];
            for a in 0..3 {
                let s = strides[a];
                acc -= self.face[a][idx] * x[idx + s];
                acc -= self.face[a][idx - s] * x[idx - s];
            }
            *yi = acc;
        });
    }

    /// Residual `b - A x` with `x` holding Dirichlet values on the boundary.
    fn residual(&self, x: &[f64], r: &mut [f64]) {
        let strides = self.grid.strides();
        r.par_iter_mut().enumerate().for_each(|(idx, ri)| {
            if self.dirichlet[idx] {
                *ri = 0.0;
                return;
            }
            let mut acc = self.diag[idx] * x[idx];
            for a in 0..3 {
                let s = strides[a];
                acc -= self.face[a][idx] * x[idx + s];
                acc -= self.face[a][idx - s] * x[idx - s];
            }
            *ri = self.rhs[idx] - acc;
        });
    }

    /// Right-hand side of the interior rows with boundary couplings folded
    /// in, as used for relative residuals.
    fn rhs_norm(&self, boundary: &[f64]) -> f64 {
        let strides = self.grid.strides();
        let v: Vec<f64> = (0..self.grid.len())
            .into_par_iter()
            .map(|idx| {
                if self.dirichlet[idx] {
                    return 0.0;
                }
                let mut b = self.rhs[idx];
                for a in 0..3 {
                    let s = strides[a];
                    if self.dirichlet[idx + s] {
                        b += self.face[a][idx] * boundary[idx + s];
                    }
                    if self.dirichlet[idx - s] {
                        b += self.face[a][idx - s] * boundary[idx - s];
                    }
                }
                b
            })
            .collect();
        norm(&v)
    }

    /// Dense copy of the interior block with its interior index list, for
    /// cross-checking against direct solvers on small grids.
    pub fn dense_interior(&self) -> (Vec<usize>, Vec<Vec<f64>>) {
        let interior: Vec<usize> = (0..self.grid.len()).filter(|&i| !self.dirichlet[i]).collect();
        let mat = interior
            .iter()
            .map(|&i| interior.iter().map(|&j| self.entry(i, j)).collect())
            .collect();
        (interior, mat)
    }

    /// Interior right-hand side including the boundary couplings.
    pub fn effective_rhs(&self, boundary: &[f64]) -> Vec<f64> {
        let strides = self.grid.strides();
        (0..self.grid.len())
            .map(|idx| {
                if self.dirichlet[idx] {
                    return boundary[idx];
                }
                let mut b = self.rhs[idx];
                for a in 0..3 {
                    let s = strides[a];
                    if self.dirichlet[idx + s] {
                        b += self.face[a][idx] * boundary[idx + s];
                    }
                    if self.dirichlet[idx - s] {
                        b += self.face[a][idx - s] * boundary[idx - s];
                    }
                }
                b
            })
            .collect()
    }
}

/// Face dielectrics from the mean of `u` across each face.
pub fn face_dielectrics(u: &ScalarField, params: &PhysicalParams) -> [Vec<f64>; 3] {
    let grid = u.grid();
    let dims = grid.dims();
    let strides = grid.strides();
    let vals = u.values();
    let mut out: [Vec<f64>; 3] = Default::default();
    for a in 0..3 {
        let s = strides[a];
        out[a] = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let c = grid.coords(idx);
                if c[a] + 1 < dims[a] {
                    params.dielectric_at(0.5 * (vals[idx] + vals[idx + s]))
                } else {
                    0.0
                }
            })
            .collect();
    }
    out
}

/// Converged potential plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub psi: ScalarField,
    /// Total Krylov iterations over all Newton steps.
    pub iterations: usize,
    pub newton_steps: usize,
    /// Final relative residual of the (nonlinear) equation.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Nodes where the Boltzmann exponent was clamped.
    pub saturated: usize,
}

/// A Poisson-Boltzmann problem for one molecule on one grid: fixed charges and
/// Dirichlet data, solvable for any interface field `u`.
#[derive(Debug, Clone)]
pub struct PbProblem {
    grid: Grid,
    charges: ChargeGrid,
    boundary: Vec<f64>,
    params: PhysicalParams,
    cfg: PbConfig,
}

impl PbProblem {
    pub fn new(molecule: &Molecule, grid: &Grid, params: &PhysicalParams, cfg: PbConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        let charges = spread_charges(molecule, grid)?;
        let kappa = params.debye_kappa();
        let boundary = boundary_values(molecule, grid, params.coulomb, params.eps_s, kappa)?;
        Ok(Self {
            grid: *grid,
            charges,
            boundary,
            params: params.clone(),
            cfg,
        })
    }

    /// Same charges in a uniform solute dielectric with no ions: the vacuum
    /// reference state whose energy is subtracted from solvated energies.
    pub fn vacuum(&self, molecule: &Molecule) -> Result<Self> {
        let mut params = self.params.clone();
        params.eps_s = params.eps_m;
        params.ions = Ions {
            species: Vec::new(),
            beta: params.ions.beta,
        };
        let boundary = boundary_values(molecule, &self.grid, params.coulomb, params.eps_m, 0.0)?;
        Ok(Self {
            grid: self.grid,
            charges: self.charges.clone(),
            boundary,
            params,
            cfg: self.cfg,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn charges(&self) -> &ChargeGrid {
        &self.charges
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn config(&self) -> &PbConfig {
        &self.cfg
    }

    pub fn boundary_values(&self) -> &[f64] {
        &self.boundary
    }

    fn has_salt(&self) -> bool {
        !self.params.ions.is_empty()
    }

    /// Assembles the stencil, linearizing the ionic term about `psi_ref`.
    pub fn assemble(&self, u: &ScalarField, psi_ref: Option<&ScalarField>) -> Result<LinearSystem> {
        if u.grid() != &self.grid {
            return Err(Error::Input("interface field lives on a different grid".into()));
        }
        self.assemble_with_faces(face_dielectrics(u, &self.params), u, psi_ref)
    }

    /// Assembles with caller-supplied face dielectrics (see [`face_dielectrics`]
    /// for the layout); `u` still sets the ionic accessibility.
    pub fn assemble_with_faces(
        &self,
        face: [Vec<f64>; 3],
        u: &ScalarField,
        psi_ref: Option<&ScalarField>,
    ) -> Result<LinearSystem> {
        if face.iter().any(|f| f.len() != self.grid.len()) {
            return Err(Error::Input("face dielectric arrays do not match the grid".into()));
        }
        let grid = self.grid;
        let h = grid.spacing();
        let scale = field_scale(&self.params);
        let strides = grid.strides();
        let dirichlet: Vec<bool> = (0..grid.len()).map(|i| grid.is_boundary_index(i)).collect();
        let salt = self.has_salt();
        let p = self.params.p();
        let q_k = self.params.q_k;
        let ions = &self.params.ions;
        let uv = u.values();
        let qv = self.charges.values();
        let psi_ref_vals = psi_ref.map(|f| f.values());

        let (diag, rhs): (Vec<f64>, Vec<f64>) = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                if dirichlet[idx] {
                    return (1.0, self.boundary[idx]);
                }
                let mut d = 0.0;
                for a in 0..3 {
                    d += face[a][idx] + face[a][idx - strides[a]];
                }
                let mut b = scale * qv[idx] / h;
                if salt {
                    let c = q_k - uv[idx].clamp(0.0, 1.0).powf(p);
                    let s0 = psi_ref_vals.map_or(0.0, |v| v[idx]);
                    let w = scale * h * h * c;
                    let b2 = ions.b_second(s0);
                    d += w * b2;
                    b -= w * (ions.b_prime(s0) - b2 * s0);
                }
                (d, b)
            })
            .unzip();

        Ok(LinearSystem {
            grid,
            face,
            diag,
            rhs,
            dirichlet,
        })
    }

    /// Relative nonlinear residual of `psi` for interface field `u`.
    pub fn residual(&self, u: &ScalarField, psi: &ScalarField) -> Result<f64> {
        let sys = self.assemble(u, None)?;
        let r = self.nonlinear_residual(&sys, u, psi.values());
        let b = sys_rhs_charges_only(&sys, &self.boundary, self, u);
        Ok(relative(norm(&r), b))
    }

    fn nonlinear_residual(&self, sys: &LinearSystem, u: &ScalarField, psi: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let h = grid.spacing();
        let scale = field_scale(&self.params);
        let strides = grid.strides();
        let p = self.params.p();
        let q_k = self.params.q_k;
        let ions = &self.params.ions;
        let salt = self.has_salt();
        let qv = self.charges.values();
        let uv = u.values();
        (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                if sys.dirichlet[idx] {
                    return 0.0;
                }
                let mut flux = 0.0;
                for a in 0..3 {
                    let s = strides[a];
                    flux += sys.face[a][idx] * (psi[idx] - psi[idx + s]);
                    flux += sys.face[a][idx - s] * (psi[idx] - psi[idx - s]);
                }
                let mut f = scale * qv[idx] / h - flux;
                if salt {
                    let c = q_k - uv[idx].clamp(0.0, 1.0).powf(p);
                    f -= scale * h * h * c * ions.b_prime(psi[idx]);
                }
                f
            })
            .collect()
    }

    /// Solves for `u`, starting from `guess` (zero interior when absent).
    pub fn solve(&self, u: &ScalarField, guess: Option<&ScalarField>) -> Result<PotentialField> {
        if u.grid() != &self.grid {
            return Err(Error::Input("interface field lives on a different grid".into()));
        }
        self.solve_with_faces(face_dielectrics(u, &self.params), u, guess)
    }

    /// As [`PbProblem::solve`] with explicit face dielectrics.
    pub fn solve_with_faces(
        &self,
        face: [Vec<f64>; 3],
        u: &ScalarField,
        guess: Option<&ScalarField>,
    ) -> Result<PotentialField> {
        let mut psi = match guess {
            Some(g) if g.grid() == &self.grid => g.values().to_vec(),
            Some(_) => return Err(Error::Input("initial guess lives on a different grid".into())),
            None => vec![0.0; self.grid.len()],
        };
        for (idx, v) in psi.iter_mut().enumerate() {
            if self.grid.is_boundary_index(idx) {
                *v = self.boundary[idx];
            }
        }

        let mut iterations = 0;
        let mut history = Vec::new();
        let mut newton_steps = 0;

        if !self.has_salt() {
            let sys = self.assemble_with_faces(face, u, None)?;
            let bnorm = sys.rhs_norm(&self.boundary);
            let (its, res) = pcg(&sys, &mut psi, bnorm, self.cfg.tol, self.cfg.max_iter, &mut history)?;
            iterations += its;
            let out = ScalarField::from_values(self.grid, psi)
                .map_err(|e| Error::Numerical(format!("potential: {e}")))?;
            self.check_bound(&out)?;
            return Ok(PotentialField {
                psi: out,
                iterations,
                newton_steps: 0,
                residual: res,
                residual_history: history,
                saturated: 0,
            });
        }

        // damped Newton on the ionic nonlinearity
        let base = self.assemble_with_faces(face.clone(), u, None)?;
        let bnorm = sys_rhs_charges_only(&base, &self.boundary, self, u);
        let mut res = relative(norm(&self.nonlinear_residual(&base, u, &psi)), bnorm);
        let mut newton_hist = vec![res];
        while res > self.cfg.tol {
            if newton_steps >= self.cfg.max_newton {
                return Err(Error::Solver {
                    message: format!("Newton iteration did not converge in {} steps", self.cfg.max_newton),
                    residuals: tail(&newton_hist),
                });
            }
            newton_steps += 1;
            let psi_field = ScalarField::from_values(self.grid, psi.clone())
                .map_err(|e| Error::Numerical(format!("Newton iterate: {e}")))?;
            let sys = self.assemble_with_faces(face.clone(), u, Some(&psi_field))?;
            let mut trial = psi.clone();
            // inexact Newton: the linear solve only needs to beat the current
            // nonlinear residual by a margin
            let lin_tol = (0.01 * res).max(0.1 * self.cfg.tol);
            let (its, _) = pcg(&sys, &mut trial, bnorm, lin_tol, self.cfg.max_iter, &mut history)?;
            iterations += its;

            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let cand: Vec<f64> = psi.iter().zip(&trial).map(|(o, n)| o + lambda * (n - o)).collect();
                let r = relative(norm(&self.nonlinear_residual(&base, u, &cand)), bnorm);
                if r.is_finite() && r < res {
                    psi = cand;
                    res = r;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            newton_hist.push(res);
            if !accepted {
                return Err(Error::Solver {
                    message: "damped Newton step failed to reduce the residual".into(),
                    residuals: tail(&newton_hist),
                });
            }
        }
        let saturated = psi.iter().filter(|&&s| self.params.ions.saturates(s)).count();
        if saturated > 0 {
            log::warn!("Boltzmann exponent clamped at {saturated} nodes");
        }
        let out = ScalarField::from_values(self.grid, psi)
            .map_err(|e| Error::Numerical(format!("potential: {e}")))?;
        self.check_bound(&out)?;
        Ok(PotentialField {
            psi: out,
            iterations,
            newton_steps,
            residual: res,
            residual_history: newton_hist,
            saturated,
        })
    }

    fn check_bound(&self, psi: &ScalarField) -> Result<()> {
        let m = psi.max_abs();
        if !(m <= self.cfg.psi_bound) {
            return Err(Error::Numerical(format!(
                "|psi| reached {m:.3e}, above the sanity bound {:.3e}",
                self.cfg.psi_bound
            )));
        }
        Ok(())
    }
}

/// Convenience wrapper: builds the problem and solves it once.
pub fn solve_ppb(
    u: &ScalarField,
    molecule: &Molecule,
    params: &PhysicalParams,
    initial_guess: Option<&ScalarField>,
    cfg: PbConfig,
) -> Result<PotentialField> {
    PbProblem::new(molecule, u.grid(), params, cfg)?.solve(u, initial_guess)
}

fn boundary_values(molecule: &Molecule, grid: &Grid, coulomb: f64, eps: f64, kappa: f64) -> Result<Vec<f64>> {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            if grid.is_boundary_index(idx) {
                screened_coulomb(molecule, grid.position_of(idx), coulomb, eps, kappa)
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Norm of the charge and boundary forcing, used to normalize nonlinear residuals.
fn sys_rhs_charges_only(sys: &LinearSystem, boundary: &[f64], pb: &PbProblem, _u: &ScalarField) -> f64 {
    let h = pb.grid.spacing();
    let scale = field_scale(&pb.params);
    let strides = pb.grid.strides();
    let q = pb.charges.values();
    let v: Vec<f64> = (0..pb.grid.len())
        .into_par_iter()
        .map(|idx| {
            if sys.dirichlet[idx] {
                return 0.0;
            }
            let mut b = scale * q[idx] / h;
            for a in 0..3 {
                let s = strides[a];
                if sys.dirichlet[idx + s] {
                    b += sys.face[a][idx] * boundary[idx + s];
                }
                if sys.dirichlet[idx - s] {
                    b += sys.face[a][idx - s] * boundary[idx - s];
                }
            }
            b
        })
        .collect();
    norm(&v)
}

/// Jacobi-preconditioned conjugate gradients on the interior block. `x`
/// carries the Dirichlet values on boundary nodes and the initial guess
/// elsewhere. Returns (iterations, final relative residual).
fn pcg(
    sys: &LinearSystem,
    x: &mut [f64],
    bnorm: f64,
    tol: f64,
    max_iter: usize,
    history: &mut Vec<f64>,
) -> Result<(usize, f64)> {
    let n = x.len();
    let mut r = vec![0.0; n];
    sys.residual(x, &mut r);
    let rel0 = relative(norm(&r), bnorm);
    if rel0 <= tol {
        history.push(rel0);
        return Ok((0, rel0));
    }
    let inv_diag: Vec<f64> = sys
        .diag
        .iter()
        .zip(&sys.dirichlet)
        .map(|(&d, &bc)| if bc { 0.0 } else { 1.0 / d })
        .collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = rel0;
    for it in 1..=max_iter {
        sys.apply_interior(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver {
                message: format!("conjugate gradients broke down (pAp = {pap:e})"),
                residuals: tail(history),
            });
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        rel = relative(norm(&r), bnorm);
        if it % 50 == 0 {
            history.push(rel);
        }
        if rel <= tol {
            // recompute the true residual to guard against drift
            sys.residual(x, &mut r);
            rel = relative(norm(&r), bnorm);
            if rel <= tol * 10.0 {
                history.push(rel);
                return Ok((it, rel));
            }
        }
        z.par_iter_mut()
            .zip(&r)
            .zip(&inv_diag)
            .for_each(|((zi, ri), di)| *zi = ri * di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    history.push(rel);
    Err(Error::Solver {
        message: format!("conjugate gradients did not reach {tol:e} in {max_iter} iterations"),
        residuals: tail(history),
    })
}

/// Chunked sum with a fixed reduction order, independent of thread count.
pub(crate) fn det_sum(values: impl IndexedParallelIterator<Item = f64>) -> f64 {
    let partial: Vec<f64> = values.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partial.iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    det_sum(a.par_iter().zip(b).map(|(x, y)| x * y))
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn relative(r: f64, b: f64) -> f64 {
    if b > 0.0 {
        r / b
    } else {
        r
    }
}

fn tail(h: &[f64]) -> Vec<f64> {
    h[h.len().saturating_sub(10)..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::molecule::Atom;
    use approx::assert_relative_eq;

    fn ion(q: f64, pos: [f64; 3]) -> Molecule {
        Molecule::new(vec![Atom::new(pos, q, 1.5, "C")]).unwrap()
    }

    #[test]
    fn charge_on_node_stays_on_node() {
        let mol = ion(0.7, [0.0; 3]);
        let g = build_grid(&mol, 0.5, 0.65, 2.0).unwrap();
        let cg = spread_charges(&mol, &g).unwrap();
        let (cell, _) = g.locate([0.0; 3]).unwrap();
        let idx = g.index(cell[0], cell[1], cell[2]);
        assert_eq!(cg.values()[idx], 0.7);
        assert_eq!(cg.values().iter().filter(|&&q| q != 0.0).count(), 1);
    }

    #[test]
    fn charge_at_cell_center_splits_eight_ways() {
        let mol = ion(0.8, [0.25, 0.25, 0.25]);
        let g = Grid::new([-3.0; 3], [13, 13, 13], 0.5).unwrap();
        let cg = spread_charges(&mol, &g).unwrap();
        let nz: Vec<f64> = cg.values().iter().copied().filter(|&q| q != 0.0).collect();
        assert_eq!(nz.len(), 8);
        for q in nz {
            assert_relative_eq!(q, 0.1, max_relative = 1e-14);
        }
    }

    #[test]
    fn charge_outside_interior_rejected() {
        let g = Grid::new([0.0; 3], [5, 5, 5], 1.0).unwrap();
        assert!(spread_charges(&ion(1.0, [10.0, 1.0, 1.0]), &g).is_err());
        assert!(spread_charges(&ion(1.0, [0.5, 2.0, 2.0]), &g).is_err());
    }

    #[test]
    fn boundary_potential_values() {
        let params = PhysicalParams::default();
        let mol = ion(1.0, [0.0; 3]);
        let v = boundary_potential(&mol, [10.0, 0.0, 0.0], &params).unwrap();
        assert_relative_eq!(v, 332.0716 / 800.0, max_relative = 1e-14);
        let neutral = ion(0.0, [0.0; 3]);
        assert_eq!(boundary_potential(&neutral, [3.0, 0.0, 0.0], &params).unwrap(), 0.0);
        let pair = Molecule::new(vec![
            Atom::new([0.0; 3], 1.0, 1.0, "C"),
            Atom::new([1.0, 0.0, 0.0], -0.4, 1.0, "C"),
        ])
        .unwrap();
        let x = [4.0, 3.0, 0.0];
        let sum = boundary_potential(&ion(1.0, [0.0; 3]), x, &params).unwrap()
            + boundary_potential(&ion(-0.4, [1.0, 0.0, 0.0]), x, &params).unwrap();
        assert_relative_eq!(boundary_potential(&pair, x, &params).unwrap(), sum, max_relative = 1e-14);
        assert!(boundary_potential(&mol, [0.0; 3], &params).is_err());
    }

    #[test]
    fn debye_kappa_for_physiological_salt() {
        let params = PhysicalParams {
            ions: Ions::symmetric_salt(0.15, 1.0),
            ..PhysicalParams::default()
        };
        // Debye length of 0.15 M 1:1 salt in water at 298 K is about 7.8-8 Å
        let debye = 1.0 / params.debye_kappa();
        assert!(debye > 7.5 && debye < 8.2, "{debye}");
    }

    #[test]
    fn stencil_structure() {
        let mol = ion(1.0, [0.0; 3]);
        let params = PhysicalParams::default();
        let g = Grid::new([-2.0; 3], [9, 9, 9], 0.5).unwrap();
        let u = ScalarField::from_fn(g, |x| if x[0] < 0.3 { 1.0 } else { 0.2 });
        let pb = PbProblem::new(&mol, &g, &params, PbConfig::default()).unwrap();
        let sys = pb.assemble(&u, None).unwrap();
        for i in 0..g.len() {
            if sys.is_dirichlet(i) {
                continue;
            }
            let mut row_sum = sys.entry(i, i);
            for j in 0..g.len() {
                if j == i || sys.is_dirichlet(j) {
                    continue;
                }
                let aij = sys.entry(i, j);
                assert!(aij <= 0.0);
                assert_eq!(aij, sys.entry(j, i));
            }
            let s = g.strides();
            for a in 0..3 {
                row_sum -= sys.face_dielectric(a, i) + sys.face_dielectric(a, i - s[a]);
            }
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_dielectric_is_scaled_laplacian() {
        let mol = ion(0.0, [0.0; 3]);
        let params = PhysicalParams::default();
        let g = Grid::new([-2.0; 3], [9, 9, 9], 0.5).unwrap();
        let u = ScalarField::constant(g, 1.0);
        let pb = PbProblem::new(&mol, &g, &params, PbConfig::default()).unwrap();
        let sys = pb.assemble(&u, None).unwrap();
        let c = g.index(4, 4, 4);
        assert_relative_eq!(sys.entry(c, c), 6.0 * params.eps_m);
        assert_relative_eq!(sys.entry(c, c + 1), -params.eps_m);
    }

    #[test]
    fn homogeneous_problem_gives_zero_potential() {
        let mol = ion(0.0, [0.0; 3]);
        let params = PhysicalParams::default();
        let g = build_grid(&mol, 0.5, 0.65, 2.0).unwrap();
        let u = ScalarField::constant(g, 0.3);
        let sol = solve_ppb(&u, &mol, &params, None, PbConfig::default()).unwrap();
        assert_eq!(sol.psi.max_abs(), 0.0);
    }

    #[test]
    fn matches_dense_solve_on_small_grid() {
        let mol = ion(1.0, [0.1, -0.2, 0.15]);
        let params = PhysicalParams::default();
        let g = Grid::new([-1.0; 3], [5, 5, 5], 0.5).unwrap();
        let u = ScalarField::from_fn(g, |x| (1.0 - (x[0] * x[0] + x[1] * x[1]) / 2.0).clamp(0.0, 1.0));
        let cfg = PbConfig { tol: 1e-12, ..PbConfig::default() };
        let pb = PbProblem::new(&mol, &g, &params, cfg).unwrap();
        let sol = pb.solve(&u, None).unwrap();
        let sys = pb.assemble(&u, None).unwrap();
        let (interior, dense) = sys.dense_interior();
        let n = interior.len();
        let a = nalgebra::DMatrix::from_fn(n, n, |i, j| dense[i][j]);
        let b_full = sys.effective_rhs(pb.boundary_values());
        let b = nalgebra::DVector::from_fn(n, |i, _| b_full[interior[i]]);
        let x = a.lu().solve(&b).unwrap();
        for (k, &idx) in interior.iter().enumerate() {
            assert_relative_eq!(sol.psi.values()[idx], x[k], max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn salt_solution_independent_of_guess() {
        let mol = ion(1.0, [0.0; 3]);
        let params = PhysicalParams {
            ions: Ions::symmetric_salt(0.5, 1.0),
            ..PhysicalParams::default()
        };
        let g = build_grid(&mol, 0.5, 0.65, 3.0).unwrap();
        let u = ScalarField::from_fn(g, |x| if x.iter().map(|v| v * v).sum::<f64>() < 2.25 { 1.0 } else { 0.0 });
        let cfg = PbConfig { tol: 1e-10, ..PbConfig::default() };
        let pb = PbProblem::new(&mol, &g, &params, cfg).unwrap();
        let a = pb.solve(&u, None).unwrap();
        let guess = ScalarField::constant(g, 5.0);
        let b = pb.solve(&u, Some(&guess)).unwrap();
        assert!(a.newton_steps >= 1);
        let scale = a.psi.max_abs();
        assert!(a.psi.max_abs_diff(&b.psi) < 1e-7 * scale);
        assert!(pb.residual(&u, &a.psi).unwrap() < 1e-9);
    }
}
