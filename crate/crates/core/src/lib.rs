//! Variational implicit-solvent model on a Cartesian grid.
//!
//! A solute is described by atoms (centers, charges, radii, Lennard-Jones
//! types). The solute-solvent interface is a diffuse field `u` that equals 1
//! in the solute, 0 in bulk solvent and varies smoothly across a mixing band.
//! The solvation free energy couples surface tension, pressure-volume work,
//! solute-solvent van der Waals interaction and the electrostatic energy from
//! a perturbed Poisson-Boltzmann equation. [`coupling::self_consistent_solve`]
//! minimizes it by alternating potential solves with interface relaxation.

pub mod coupling;
pub mod domain;
pub mod energy;
pub mod error;
pub mod evolution;
pub mod fitting;
pub mod grid;
pub mod io;
pub mod molecule;
pub mod nnls;
pub mod pb;
pub mod physics;
pub mod validation;

pub use coupling::{self_consistent_solve, CouplingConfig, Solution, SolvationSystem};
pub use domain::{classify_domains, DomainMasks, Region};
pub use energy::EnergyReport;
pub use error::{Error, Result};
pub use evolution::{EvolutionConfig, InitProfile, InterfaceField};
pub use fitting::{fit_parameters, FitConfig, FitDataset, FitParameters, FitState};
pub use grid::{build_grid, Grid, GridSpec, ScalarField};
pub use molecule::{Atom, Molecule};
pub use pb::{solve_ppb, PbConfig, PbProblem, PotentialField};
pub use physics::{Ions, LjParams, PhysicalParams};
