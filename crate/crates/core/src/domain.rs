//! Pure-solute / pure-solvent / mixing-band decomposition of the grid.
//!
//! The pure solute region is the union of van der Waals balls and the pure
//! solvent region is the exterior of the solvent-accessible union (balls
//! inflated by the probe radius). Both surfaces are crisp level sets of the
//! union-of-balls signed distance sampled at the nodes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::molecule::{distance, Molecule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Solute,
    Solvent,
    Mixing,
}

/// Signed distance to the union of balls of radius `r_i + radius_offset`;
/// negative inside.
pub fn signed_distance_union_balls(
    molecule: &Molecule,
    radius_offset: f64,
    grid: &Grid,
) -> Result<ScalarField> {
    if !(radius_offset >= 0.0) {
        return Err(Error::Config(format!(
            "radius offset must be non-negative, got {radius_offset}"
        )));
    }
    let atoms = molecule.atoms();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.position_of(idx);
            atoms
                .iter()
                .map(|a| distance(x, a.position) - (a.radius + radius_offset))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    ScalarField::from_values(*grid, values)
}

/// Per-node region labels with cached index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMasks {
    grid: Grid,
    region: Vec<Region>,
    solute: Vec<usize>,
    solvent: Vec<usize>,
    mixing: Vec<usize>,
}

impl DomainMasks {
    /// Builds masks from explicit labels. Grid-boundary nodes must be solvent.
    pub fn from_labels(grid: Grid, region: Vec<Region>) -> Result<Self> {
        if region.len() != grid.len() {
            return Err(Error::Config("label count does not match the grid".into()));
        }
        let mut solute = Vec::new();
        let mut solvent = Vec::new();
        let mut mixing = Vec::new();
        for (idx, r) in region.iter().enumerate() {
            if grid.is_boundary_index(idx) && *r != Region::Solvent {
                return Err(Error::Config(format!(
                    "grid-boundary node {idx} must be labelled solvent"
                )));
            }
            match r {
                Region::Solute => solute.push(idx),
                Region::Solvent => solvent.push(idx),
                Region::Mixing => mixing.push(idx),
            }
        }
        if solute.is_empty() {
            return Err(Error::Config("no pure-solute nodes: grid too coarse for the atoms".into()));
        }
        if solvent.is_empty() {
            return Err(Error::Config("no pure-solvent nodes remain".into()));
        }
        Ok(Self {
            grid,
            region,
            solute,
            solvent,
            mixing,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn region(&self, idx: usize) -> Region {
        self.region[idx]
    }

    pub fn regions(&self) -> &[Region] {
        &self.region
    }

    pub fn solute(&self) -> &[usize] {
        &self.solute
    }

    pub fn solvent(&self) -> &[usize] {
        &self.solvent
    }

    pub fn mixing(&self) -> &[usize] {
        &self.mixing
    }
}

/// Labels every node as solute, solvent or mixing band.
pub fn classify_domains(molecule: &Molecule, probe_radius: f64, grid: &Grid) -> Result<DomainMasks> {
    if !(probe_radius > 0.0) {
        return Err(Error::Config(format!(
            "probe radius must be positive, got {probe_radius}"
        )));
    }
    let vdw = signed_distance_union_balls(molecule, 0.0, grid)?;
    let sas = signed_distance_union_balls(molecule, probe_radius, grid)?;
    let region: Vec<Region> = (0..grid.len())
        .map(|idx| {
            if grid.is_boundary_index(idx) {
                Region::Solvent
            } else if vdw.values()[idx] <= 0.0 {
                Region::Solute
            } else if sas.values()[idx] >= 0.0 {
                Region::Solvent
            } else {
                Region::Mixing
            }
        })
        .collect();

    let interior_solvent = region
        .iter()
        .enumerate()
        .any(|(idx, r)| *r == Region::Solvent && !grid.is_boundary_index(idx));
    if !interior_solvent {
        return Err(Error::Config(
            "molecule fills the grid: no interior pure-solvent nodes remain".into(),
        ));
    }
    let masks = DomainMasks::from_labels(*grid, region)?;

    // every atom center must sit in a cell touching the pure solute region
    let strides = grid.strides();
    for (n, atom) in molecule.atoms().iter().enumerate() {
        let (cell, _) = grid.locate(atom.position).ok_or_else(|| {
            Error::Config(format!("atom {n} lies outside the grid"))
        })?;
        let base = grid.index(cell[0], cell[1], cell[2]);
        let touches = (0..8).any(|corner| {
            let idx = base
                + (corner & 1) * strides[0]
                + ((corner >> 1) & 1) * strides[1]
                + ((corner >> 2) & 1) * strides[2];
            masks.region(idx) == Region::Solute
        });
        if !touches {
            return Err(Error::Config(format!(
                "atom {n} (radius {}) is not resolved by grid spacing {}",
                atom.radius,
                grid.spacing()
            )));
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::molecule::Atom;

    fn single(r: f64) -> Molecule {
        Molecule::new(vec![Atom::new([0.0; 3], 0.0, r, "C")]).unwrap()
    }

    #[test]
    fn single_ball_distance_values() {
        let mol = single(2.0);
        let g = build_grid(&mol, 0.5, 0.65, 2.0).unwrap();
        let sd = signed_distance_union_balls(&mol, 0.0, &g).unwrap();
        let (cell, _) = g.locate([0.0; 3]).unwrap();
        let c = g.index(cell[0], cell[1], cell[2]);
        assert!((sd.values()[c] + 2.0).abs() < 1e-12);
        // node 3 Å away along +x
        let far = g.index(cell[0] + 6, cell[1], cell[2]);
        assert!((sd.values()[far] - 1.0).abs() < 1e-12);
        let sd_off = signed_distance_union_balls(&mol, 0.65, &g).unwrap();
        assert!((sd_off.values()[c] + 2.65).abs() < 1e-12);
        assert!(signed_distance_union_balls(&mol, -0.1, &g).is_err());
    }

    #[test]
    fn overlapping_balls_take_minimum() {
        let mol = Molecule::new(vec![
            Atom::new([0.0; 3], 0.0, 1.5, "C"),
            Atom::new([2.0, 0.0, 0.0], 0.0, 1.0, "C"),
        ])
        .unwrap();
        let g = build_grid(&mol, 0.25, 0.65, 1.0).unwrap();
        let sd = signed_distance_union_balls(&mol, 0.3, &g).unwrap();
        for idx in (0..g.len()).step_by(37) {
            let x = g.position_of(idx);
            let d1 = distance(x, [0.0; 3]) - 1.8;
            let d2 = distance(x, [2.0, 0.0, 0.0]) - 1.3;
            assert_eq!(sd.values()[idx], d1.min(d2));
        }
    }

    #[test]
    fn classify_single_atom_shells() {
        let mol = single(1.87);
        let g = build_grid(&mol, 0.5, 0.65, 3.0).unwrap();
        let masks = classify_domains(&mol, 0.65, &g).unwrap();
        let (cell, _) = g.locate([0.0; 3]).unwrap();
        let at = |d: usize| masks.region(g.index(cell[0] + d, cell[1], cell[2]));
        assert_eq!(at(2), Region::Solute); // 1.0 Å
        assert_eq!(at(4), Region::Mixing); // 2.0 Å
        assert_eq!(at(6), Region::Solvent); // 3.0 Å
        assert_eq!(masks.region(0), Region::Solvent);
        assert_eq!(masks.region(g.len() - 1), Region::Solvent);
        let total = masks.solute().len() + masks.solvent().len() + masks.mixing().len();
        assert_eq!(total, g.len());
    }

    #[test]
    fn tiny_probe_thins_band() {
        let mol = single(1.87);
        let g = build_grid(&mol, 0.25, 0.65, 2.0).unwrap();
        let wide = classify_domains(&mol, 0.65, &g).unwrap();
        let thin = classify_domains(&mol, 0.01, &g).unwrap();
        assert!(thin.mixing().len() < wide.mixing().len() / 10);
        assert!(classify_domains(&mol, 0.0, &g).is_err());
    }

    #[test]
    fn molecule_filling_grid_is_rejected() {
        let mol = single(5.0);
        let g = Grid::new([-2.0; 3], [5, 5, 5], 1.0).unwrap();
        assert!(matches!(classify_domains(&mol, 0.65, &g), Err(Error::Config(_))));
    }
}
