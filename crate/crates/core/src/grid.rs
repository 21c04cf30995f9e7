//! Uniform Cartesian lattice and the scalar fields that live on it.
//!
//! Node `(i, j, k)` sits at `origin + h * (i, j, k)`. Field values are stored
//! row-major with the z index fastest: `idx = (i * ny + j) * nz + k`. Every
//! field reader and writer in the crate uses this layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::Molecule;

/// Uniform 3-D grid with equal spacing on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    origin: [f64; 3],
    dims: [usize; 3],
    h: f64,
}

impl Grid {
    pub fn new(origin: [f64; 3], dims: [usize; 3], h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
        }
        if dims.iter().any(|&n| n < 3) {
            return Err(Error::Config(format!(
                "grid needs at least 3 nodes per axis, got {dims:?}"
            )));
        }
        if origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(Self { origin, dims, h })
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Volume element attached to every node.
    pub fn cell_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of node `(i, j, k)`.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.h * i as f64,
            self.origin[1] + self.h * j as f64,
            self.origin[2] + self.h * k as f64,
        ]
    }

    #[inline]
    pub fn position_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.position(i, j, k)
    }

    /// Flat-index offsets of the +x, +y, +z neighbors.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [self.dims[1] * self.dims[2], self.dims[2], 1]
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        i == 0
            || j == 0
            || k == 0
            || i + 1 == self.dims[0]
            || j + 1 == self.dims[1]
            || k + 1 == self.dims[2]
    }

    #[inline]
    pub fn is_boundary_index(&self, idx: usize) -> bool {
        let [i, j, k] = self.coords(idx);
        self.is_boundary(i, j, k)
    }

    /// Upper corner of the lattice.
    pub fn extent(&self) -> [f64; 3] {
        let [nx, ny, nz] = self.dims;
        self.position(nx - 1, ny - 1, nz - 1)
    }

    /// Lower-corner cell index and fractional offsets of `x`, when `x` lies
    /// inside the lattice box.
    pub fn locate(&self, x: [f64; 3]) -> Option<([usize; 3], [f64; 3])> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = (x[a] - self.origin[a]) / self.h;
            if !(s >= 0.0) || s > (self.dims[a] - 1) as f64 {
                return None;
            }
            // keep the upper face inside the last cell
            let c = (s.floor() as usize).min(self.dims[a] - 2);
            cell[a] = c;
            frac[a] = s - c as f64;
        }
        Some((cell, frac))
    }

    /// Returns a copy translated by `shift`.
    pub fn translated(&self, shift: [f64; 3]) -> Self {
        Self {
            origin: [
                self.origin[0] + shift[0],
                self.origin[1] + shift[1],
                self.origin[2] + shift[2],
            ],
            ..*self
        }
    }
}

/// Placement parameters for [`build_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Node spacing (Å).
    pub h: f64,
    /// Extra solvent padding beyond the solvent-accessible surface (Å).
    pub pad: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { h: 0.5, pad: 6.0 }
    }
}

/// Builds a grid covering the molecule's bounding box grown by
/// `max_radius + probe_radius + pad` on every side.
///
/// The box center is always a lattice node, and the node count per axis is odd,
/// so a single atom sits exactly on a node.
pub fn build_grid(molecule: &Molecule, h: f64, probe_radius: f64, pad: f64) -> Result<Grid> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
    }
    if !(pad >= 0.0) || !(probe_radius >= 0.0) {
        return Err(Error::Config("padding and probe radius must be non-negative".into()));
    }
    let (lo, hi) = molecule.bounding_box()?;
    let margin = molecule.max_radius() + probe_radius + pad;
    let mut origin = [0.0; 3];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let center = 0.5 * (lo[a] + hi[a]);
        let half = 0.5 * (hi[a] - lo[a]) + margin;
        let n_half = ((half / h) - 1e-9).ceil().max(1.0) as usize;
        dims[a] = 2 * n_half + 1;
        origin[a] = center - h * n_half as f64;
    }
    Grid::new(origin, dims, h)
}

/// Node-valued real field on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Input(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite field value at node {pos}")));
        }
        Ok(Self { grid, values })
    }

    /// Evaluates `f` at every node position.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|idx| f(grid.position_of(idx))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.grid == other.grid
    }

    /// `self <- weight * new + (1 - weight) * self`.
    pub fn blend_from(&mut self, new: &ScalarField, weight: f64) {
        for (old, &n) in self.values.iter_mut().zip(&new.values) {
            *old = weight * n + (1.0 - weight) * *old;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Squared central-difference gradient at an interior node, falling back to
/// one-sided differences on the grid boundary.
pub(crate) fn gradient_sq(values: &[f64], grid: &Grid, idx: usize) -> f64 {
    let c = grid.coords(idx);
    let dims = grid.dims();
    let strides = grid.strides();
    let h = grid.spacing();
    let mut g2 = 0.0;
    for a in 0..3 {
        let s = strides[a];
        let d = if c[a] == 0 {
            (values[idx + s] - values[idx]) / h
        } else if c[a] + 1 == dims[a] {
            (values[idx] - values[idx - s]) / h
        } else {
            (values[idx + s] - values[idx - s]) / (2.0 * h)
        };
        g2 += d * d;
    }
    g2
}
