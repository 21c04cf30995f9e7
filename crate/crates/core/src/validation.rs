//! Reference checks: Born ion, exponent sweeps, grid-refinement order and
//! interface diffuseness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{self_consistent_solve, CouplingConfig, Solution};
use crate::domain::Region;
use crate::energy::Electrostatics;
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::grid::{Grid, ScalarField};
use crate::molecule::{Atom, Molecule};
use crate::pb::{PbConfig, PbProblem};
use crate::physics::{Ions, PhysicalParams};

/// Born solvation energy of charge `q` in a sphere of radius `r`.
pub fn born_energy_analytical(q: f64, r: f64, eps_m: f64, eps_s: f64, k_e: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("Born radius must be positive, got {r}")));
    }
    if !(eps_m > 0.0 && eps_s > 0.0) {
        return Err(Error::Domain("dielectric constants must be positive".into()));
    }
    Ok(-0.5 * k_e * q * q * (1.0 / eps_m - 1.0 / eps_s) / r)
}

/// One sharp-interface Born solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BornRun {
    pub h: f64,
    pub energy: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

/// Fraction of the segment from `a` to `b` that lies inside the ball of
/// radius `r` about the origin.
fn segment_fraction_inside(a: [f64; 3], b: [f64; 3], r: f64) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let ad = a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
    let aa = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let disc = ad * ad - dd * (aa - r * r);
    if disc <= 0.0 {
        return 0.0;
    }
    let s = disc.sqrt();
    let t0 = ((-ad - s) / dd).max(0.0);
    let t1 = ((-ad + s) / dd).min(1.0);
    (t1 - t0).max(0.0)
}

/// Face dielectrics of a sharp ball: the series average of ε_m and ε_s over
/// the face segment, weighted by the part of the segment inside the ball.
fn ball_face_dielectrics(grid: &Grid, r: f64, eps_m: f64, eps_s: f64) -> [Vec<f64>; 3] {
    let dims = grid.dims();
    let strides = grid.strides();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (a, face) in out.iter_mut().enumerate() {
        *face = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                if grid.coords(i)[a] + 1 >= dims[a] {
                    return 0.0;
                }
                let theta = segment_fraction_inside(grid.position_of(i), grid.position_of(i + strides[a]), r);
                1.0 / (theta / eps_m + (1.0 - theta) / eps_s)
            })
            .collect();
    }
    out
}

/// Sharp-interface Born solve: charge `q` at the origin inside a ball of
/// radius `r`, no salt, interface fixed (no evolution). The charge sits on a
/// grid node and the box extends `pad` beyond the ball.
pub fn born_sharp(q: f64, r: f64, h: f64, pad: f64, params: &PhysicalParams, pb: PbConfig) -> Result<BornRun> {
    let analytic = born_energy_analytical(q, r, params.eps_m, params.eps_s, params.coulomb)?;
    if !(h > 0.0) || !(pad > 0.0) {
        return Err(Error::Config("Born grid needs positive spacing and padding".into()));
    }
    let n = ((r + pad) / h).ceil() as usize;
    let dims = [2 * n + 1; 3];
    let origin = [-(n as f64) * h; 3];
    let grid = Grid::new(origin, dims, h)?;
    let mol = Molecule::new(vec![Atom::new([0.0; 3], q, r, "ion")])?;
    let params = PhysicalParams {
        ions: Ions {
            species: Vec::new(),
            beta: params.ions.beta,
        },
        ..params.clone()
    };
    let problem = PbProblem::new(&mol, &grid, &params, pb)?;
    let es = Electrostatics::new(problem, &mol)?;
    let u = ScalarField::from_fn(grid, |x| {
        if x[0] * x[0] + x[1] * x[1] + x[2] * x[2] <= r * r {
            1.0
        } else {
            0.0
        }
    });
    let face = ball_face_dielectrics(&grid, r, params.eps_m, params.eps_s);
    let sol = es.problem().solve_with_faces(face.clone(), &u, None)?;
    let energy = es.polar_energy_with_faces(&face, &u, &sol.psi).total();
    Ok(BornRun {
        h,
        energy,
        analytic,
        rel_error: ((energy - analytic) / analytic).abs(),
    })
}

/// Least-squares slope of log(error) against log(h). Non-positive errors are
/// dropped; fewer than two remaining points is an error.
pub fn richardson_order(h: &[f64], errors: &[f64]) -> Result<f64> {
    if h.len() != errors.len() {
        return Err(Error::Input("spacing and error lists differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(errors)
        .filter(|(&h, &e)| h > 0.0 && e > 0.0 && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Domain("need at least two positive errors to estimate an order".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("spacings are all equal".into()));
    }
    Ok(sxy / sxx)
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: f64,
    pub total: Option<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis_name: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn axis(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.axis).collect()
    }

    /// Totals, or `None` if any entry failed.
    pub fn totals(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(|e| e.total).collect()
    }

    /// `|E_{k+1} - E_k|`; empty when an entry failed or there is one entry.
    pub fn diffs(&self) -> Vec<f64> {
        self.totals()
            .map(|t| t.windows(2).map(|w| (w[1] - w[0]).abs()).collect())
            .unwrap_or_default()
    }

    /// (max - min) / |mean| over the totals.
    pub fn relative_spread(&self) -> Option<f64> {
        let t = self.totals()?;
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        Some((hi - lo) / mean.abs())
    }

    /// `axis_value total_energy diff`, one line per entry; the first diff and
    /// those of failed entries are `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{} total_energy diff\n", self.axis_name);
        let mut prev: Option<f64> = None;
        for e in &self.entries {
            let total = e.total.unwrap_or(f64::NAN);
            let diff = match (prev, e.total) {
                (Some(p), Some(t)) => (t - p).abs(),
                _ => f64::NAN,
            };
            s.push_str(&format!("{} {:.12e} {:.6e}\n", e.axis, total, diff));
            prev = e.total;
        }
        s
    }
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0]) || v.windows(2).all(|w| w[1] > w[0])
}

fn run_sweep(
    axis_name: &str,
    axis: &[f64],
    molecule: &Molecule,
    make: impl Fn(f64) -> Result<PhysicalParams> + Sync,
    cfg: &CouplingConfig,
    evo: &EvolutionConfig,
) -> Result<SweepResult> {
    if axis.is_empty() {
        return Err(Error::Input("empty sweep".into()));
    }
    if !strictly_monotone(axis) {
        return Err(Error::Input(format!("{axis_name} values must be strictly monotone")));
    }
    let entries = axis
        .par_iter()
        .map(|&x| {
            let res = make(x).and_then(|p| self_consistent_solve(molecule, &p, cfg, evo));
            match res {
                Ok(sol) => SweepEntry {
                    axis: x,
                    total: Some(sol.report.total),
                    converged: sol.converged,
                    outer_iterations: sol.outer_iterations(),
                    error: None,
                },
                Err(e) => SweepEntry {
                    axis: x,
                    total: None,
                    converged: false,
                    outer_iterations: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepResult {
        axis_name: axis_name.into(),
        entries,
    })
}

/// Full solves over a decreasing sequence of TV exponents `q_k` toward 1.
pub fn q_sweep(
    molecule: &Molecule,
    params: &PhysicalParams,
    q_list: &[f64],
    cfg: &CouplingConfig,
    evo: &EvolutionConfig,
) -> Result<SweepResult> {
    if q_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Input("q values must decrease toward 1".into()));
    }
    run_sweep(
        "q_k",
        q_list,
        molecule,
        |q| {
            let p = PhysicalParams { q_k: q, ..params.clone() };
            p.validate()?;
            Ok(p)
        },
        cfg,
        evo,
    )
}

/// Full solves over the integer `N` in `p = 2N/(2N-1)`.
pub fn n_sweep(
    molecule: &Molecule,
    params: &PhysicalParams,
    n_list: &[u32],
    cfg: &CouplingConfig,
    evo: &EvolutionConfig,
) -> Result<SweepResult> {
    let axis: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    run_sweep(
        "N",
        &axis,
        molecule,
        |n| {
            let p = PhysicalParams {
                n_exponent: n as u32,
                ..params.clone()
            };
            p.validate()?;
            Ok(p)
        },
        cfg,
        evo,
    )
}

/// Fraction of mixing nodes with `lo < u < hi`.
pub fn diffuseness_check(solution: &Solution, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Domain(format!("need 0 < lo < hi < 1, got ({lo}, {hi})")));
    }
    diffuse_fraction(solution.u.u(), solution.u.masks().regions(), lo, hi)
}

fn diffuse_fraction(u: &ScalarField, regions: &[Region], lo: f64, hi: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut inside = 0usize;
    for (&v, &r) in u.values().iter().zip(regions) {
        if r == Region::Mixing {
            total += 1;
            if v > lo && v < hi {
                inside += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Domain("no mixing nodes".into()));
    }
    Ok(inside as f64 / total as f64)
}
