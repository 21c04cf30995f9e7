//! Discrete solute description: atom centers, partial charges, radii and
//! force-field type tags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Center (Å).
    pub position: [f64; 3],
    /// Partial charge (e).
    pub charge: f64,
    /// van der Waals radius (Å).
    pub radius: f64,
    /// Key into the Lennard-Jones table.
    pub type_tag: String,
}

impl Atom {
    pub fn new(position: [f64; 3], charge: f64, radius: f64, type_tag: impl Into<String>) -> Self {
        Self {
            position,
            charge,
            radius,
            type_tag: type_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    atoms: Vec<Atom>,
}

impl Molecule {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Input("a molecule needs at least one atom".into()));
        }
        for (n, a) in atoms.iter().enumerate() {
            if a.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("atom {n} has a non-finite position")));
            }
            if !a.charge.is_finite() {
                return Err(Error::Input(format!("atom {n} has a non-finite charge")));
            }
            if !(a.radius > 0.0) || !a.radius.is_finite() {
                return Err(Error::Input(format!(
                    "atom {n} has radius {}, expected a positive value",
                    a.radius
                )));
            }
            if a.type_tag.is_empty() {
                return Err(Error::Input(format!("atom {n} has an empty type tag")));
            }
        }
        Ok(Self { atoms })
    }

    /// Parses the whitespace-delimited `x y z charge radius type_tag` format.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(perr(format!(
                    "expected 6 fields `x y z charge radius type_tag`, found {}",
                    fields.len()
                )));
            }
            let mut nums = [0.0; 5];
            for (slot, text) in nums.iter_mut().zip(&fields[..5]) {
                *slot = text
                    .parse::<f64>()
                    .map_err(|_| perr(format!("`{text}` is not a number")))?;
                if !slot.is_finite() {
                    return Err(perr(format!("`{text}` is not finite")));
                }
            }
            if !(nums[4] > 0.0) {
                return Err(perr(format!("radius must be positive, got {}", nums[4])));
            }
            atoms.push(Atom::new([nums[0], nums[1], nums[2]], nums[3], nums[4], fields[5]));
        }
        if atoms.is_empty() {
            return Err(Error::Input(format!("{source}: no atoms found")));
        }
        Self::new(atoms)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x y z charge radius type_tag\n");
        for a in &self.atoms {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                a.position[0], a.position[1], a.position[2], a.charge, a.radius, a.type_tag
            ));
        }
        out
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_charge(&self) -> f64 {
        self.atoms.iter().map(|a| a.charge).sum()
    }

    pub fn is_neutral_everywhere(&self) -> bool {
        self.atoms.iter().all(|a| a.charge == 0.0)
    }

    pub fn max_radius(&self) -> f64 {
        self.atoms.iter().fold(0.0f64, |m, a| m.max(a.radius))
    }

    pub fn bounding_box(&self) -> Result<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for a in &self.atoms {
            for d in 0..3 {
                if !a.position[d].is_finite() {
                    return Err(Error::Input("non-finite atom coordinate".into()));
                }
                lo[d] = lo[d].min(a.position[d]);
                hi[d] = hi[d].max(a.position[d]);
            }
        }
        Ok((lo, hi))
    }

    /// Sorted, de-duplicated type tags.
    pub fn type_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.atoms.iter().map(|a| a.type_tag.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn translated(&self, shift: [f64; 3]) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                position: [
                    a.position[0] + shift[0],
                    a.position[1] + shift[1],
                    a.position[2] + shift[2],
                ],
                ..a.clone()
            })
            .collect();
        Self { atoms }
    }

    /// Copy with every charge multiplied by `factor`.
    pub fn with_scaled_charges(&self, factor: f64) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                charge: a.charge * factor,
                ..a.clone()
            })
            .collect();
        Self { atoms }
    }
}

#[inline]
pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
