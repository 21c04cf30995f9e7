//! Python bindings: whole-molecule solves, the Born benchmark and NNLS.
//!
//! Long computations release the GIL.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use vism::physics::COULOMB_KCAL;
use vism::{CouplingConfig, EvolutionConfig, Ions, Molecule, PhysicalParams};

fn py_err(e: vism::Error) -> PyErr {
    match e {
        vism::Error::Input(_) | vism::Error::Parse { .. } | vism::Error::Config(_) | vism::Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Knobs exposed to Python; everything else keeps library defaults.
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    pub h: Option<f64>,
    pub pad: Option<f64>,
    pub gamma: Option<f64>,
    pub pressure: Option<f64>,
    pub eps_s: Option<f64>,
    pub q_k: Option<f64>,
    pub salt_molar: f64,
    pub nonpolar: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub total: f64,
    pub polar: f64,
    pub repulsive: f64,
    pub attractive: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub dims: [usize; 3],
    pub u: Vec<f64>,
}

pub fn run_solve(molecule: &str, opts: &SolveOptions) -> vism::Result<SolveSummary> {
    let mol = Molecule::parse(molecule, "<molecule>")?;
    let mut params = PhysicalParams::default();
    if let Some(v) = opts.gamma {
        params.gamma = v;
    }
    if let Some(v) = opts.pressure {
        params.pressure = v;
    }
    if let Some(v) = opts.eps_s {
        params.eps_s = v;
    }
    if let Some(v) = opts.q_k {
        params.q_k = v;
    }
    if opts.salt_molar > 0.0 {
        params.ions = Ions::symmetric_salt(opts.salt_molar, 1.0);
    }
    params.validate()?;
    let mut cfg = CouplingConfig {
        nonpolar_only: opts.nonpolar,
        ..CouplingConfig::default()
    };
    if let Some(h) = opts.h {
        cfg.grid.h = h;
    }
    if let Some(p) = opts.pad {
        cfg.grid.pad = p;
    }
    let sol = vism::self_consistent_solve(&mol, &params, &cfg, &EvolutionConfig::default())?;
    Ok(SolveSummary {
        total: sol.report.total,
        polar: sol.report.polar,
        repulsive: sol.report.repulsive,
        attractive: sol.report.attractive,
        converged: sol.converged,
        outer_iterations: sol.outer_iterations(),
        dims: sol.u.grid().dims(),
        u: sol.u.values().to_vec(),
    })
}

/// Solves a molecule given as `x y z charge radius type_tag` lines.
/// Returns energies (kcal/mol), convergence info and the final u (flat, z fastest).
#[pyfunction]
#[pyo3(signature = (molecule, *, h=None, pad=None, gamma=None, pressure=None, eps_s=None, q_k=None, salt_molar=0.0, nonpolar=false))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    molecule: &str,
    h: Option<f64>,
    pad: Option<f64>,
    gamma: Option<f64>,
    pressure: Option<f64>,
    eps_s: Option<f64>,
    q_k: Option<f64>,
    salt_molar: f64,
    nonpolar: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = SolveOptions {
        h,
        pad,
        gamma,
        pressure,
        eps_s,
        q_k,
        salt_molar,
        nonpolar,
    };
    let s = py.detach(|| run_solve(molecule, &opts)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", s.total)?;
    d.set_item("polar", s.polar)?;
    d.set_item("repulsive", s.repulsive)?;
    d.set_item("attractive", s.attractive)?;
    d.set_item("converged", s.converged)?;
    d.set_item("outer_iterations", s.outer_iterations)?;
    d.set_item("dims", s.dims.to_vec())?;
    d.set_item("u", s.u)?;
    Ok(d)
}

/// Closed-form Born solvation energy (kcal/mol).
#[pyfunction]
#[pyo3(signature = (q, r, eps_m=1.0, eps_s=80.0, k_e=COULOMB_KCAL))]
fn born_energy_analytical(q: f64, r: f64, eps_m: f64, eps_s: f64, k_e: f64) -> PyResult<f64> {
    vism::validation::born_energy_analytical(q, r, eps_m, eps_s, k_e).map_err(py_err)
}

/// Sharp-interface grid solve of the Born ion.
#[pyfunction]
#[pyo3(signature = (q=1.0, r=2.0, h=0.5, pad=6.0))]
fn born_sharp<'py>(py: Python<'py>, q: f64, r: f64, h: f64, pad: f64) -> PyResult<Bound<'py, PyDict>> {
    let run = py
        .detach(|| vism::validation::born_sharp(q, r, h, pad, &PhysicalParams::default(), Default::default()))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("h", run.h)?;
    d.set_item("energy", run.energy)?;
    d.set_item("analytic", run.analytic)?;
    d.set_item("rel_error", run.rel_error)?;
    Ok(d)
}

pub fn run_nnls(a: &[Vec<f64>], b: &[f64]) -> vism::Result<(Vec<f64>, f64)> {
    let cols = a.first().map_or(0, Vec::len);
    if a.iter().any(|r| r.len() != cols) {
        return Err(vism::Error::Input("matrix rows have different lengths".into()));
    }
    let m = DMatrix::from_fn(a.len(), cols, |i, j| a[i][j]);
    let sol = vism::nnls::nnls(&m, &DVector::from_column_slice(b))?;
    Ok((sol.x.iter().copied().collect(), sol.residual_norm))
}

/// `min ‖Ax - b‖ s.t. x ≥ 0`; `a` is a list of rows. Returns `(x, residual_norm)`.
#[pyfunction]
fn nnls(a: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    run_nnls(&a, &b).map_err(py_err)
}

#[pymodule]
fn vism_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(born_energy_analytical, m)?)?;
    m.add_function(wrap_pyfunction!(born_sharp, m)?)?;
    m.add_function(wrap_pyfunction!(nnls, m)?)?;
    m.add("COULOMB", COULOMB_KCAL)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_rejects_ragged_rows() {
        assert!(run_nnls(&[vec![1.0, 2.0], vec![1.0]], &[0.0, 0.0]).is_err());
        let (x, r) = run_nnls(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[2.0, -1.0]).unwrap();
        assert_eq!(x, vec![2.0, 0.0]);
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn neutral_atom_solve() {
        let s = run_solve(
            "0 0 0 0 1.9 C\n",
            &SolveOptions {
                h: Some(0.6),
                pad: Some(3.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.converged);
        assert_eq!(s.polar, 0.0);
        assert_eq!(s.u.len(), s.dims.iter().product::<usize>());
        assert!(s.u.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bad_molecule_reports_line() {
        let e = run_solve("0 0 0 0 1.9\n", &SolveOptions::default()).unwrap_err();
        assert!(matches!(e, vism::Error::Parse { line: 1, .. }));
    }
}
