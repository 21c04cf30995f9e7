//! Closed-form physical quantities: Lennard-Jones and its WCA attractive part,
//! the dispersion field, the ionic free-energy density and the mixture
//! dielectric.
//!
//! Units throughout: Å, kcal/mol, elementary charge. Potentials are in
//! kcal/(mol·e) and concentrations in Å⁻³.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::molecule::{distance, Atom, Molecule};

/// Coulomb constant (kcal·Å/(mol·e²)).
pub const COULOMB_KCAL: f64 = 332.0716;
/// Thermal energy at 298 K (kcal/mol).
pub const KT_298: f64 = 0.5922;
/// Multiply a molar concentration by this to get particles per Å³.
pub const MOLAR_TO_PER_A3: f64 = 6.02214e-4;
/// Largest |β q s| fed to the Boltzmann exponentials.
pub const BOLTZMANN_EXP_CLAMP: f64 = 40.0;

/// Distance at which the Lennard-Jones potential reaches its minimum, in units of σ.
pub fn wca_splice_factor() -> f64 {
    2f64.powf(1.0 / 6.0)
}

/// `4 eps [(sigma/r)^12 - (sigma/r)^6]`.
pub fn lj_potential(r: f64, eps: f64, sigma: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("Lennard-Jones potential is singular at r = {r}")));
    }
    let s6 = (sigma / r).powi(6);
    Ok(4.0 * eps * (s6 * s6 - s6))
}

/// Attractive part of the WCA split: flat `-eps` inside the minimum radius and
/// the plain Lennard-Jones tail beyond it.
pub fn wca_attractive(r: f64, eps: f64, sigma: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("WCA potential is singular at r = {r}")));
    }
    if r < wca_splice_factor() * sigma {
        Ok(-eps)
    } else {
        lj_potential(r, eps, sigma)
    }
}

/// Solute-solvent Lennard-Jones parameters for one atom type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LjPair {
    /// Well depth (kcal/mol).
    pub eps: f64,
    /// Length parameter (Å).
    pub sigma: f64,
}

/// Per-type-tag Lennard-Jones table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LjParams {
    table: BTreeMap<String, LjPair>,
}

impl LjParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: impl Into<String>, eps: f64, sigma: f64) -> Result<()> {
        let tag = tag.into();
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("well depth for `{tag}` must be >= 0, got {eps}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma for `{tag}` must be > 0, got {sigma}")));
        }
        self.table.insert(tag, LjPair { eps, sigma });
        Ok(())
    }

    pub fn get(&self, tag: &str) -> Option<LjPair> {
        self.table.get(tag).copied()
    }

    pub fn lookup(&self, tag: &str) -> Result<LjPair> {
        self.get(tag)
            .ok_or_else(|| Error::Config(format!("no Lennard-Jones parameters for type tag `{tag}`")))
    }

    pub fn set_eps(&mut self, tag: &str, eps: f64) -> Result<()> {
        let sigma = self.lookup(tag)?.sigma;
        self.insert(tag, eps, sigma)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LjPair)> {
        self.table.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Fails on the first molecule tag missing from the table.
    pub fn check_covers(&self, molecule: &Molecule) -> Result<()> {
        for tag in molecule.type_tags() {
            self.lookup(&tag)?;
        }
        Ok(())
    }

    /// Parses `type_tag eps sigma` lines; `#` starts a comment line.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut out = Self::new();
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
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(format!("expected `type_tag eps sigma`, found {} fields", f.len())));
            }
            let eps: f64 = f[1].parse().map_err(|_| perr(format!("`{}` is not a number", f[1])))?;
            let sigma: f64 = f[2].parse().map_err(|_| perr(format!("`{}` is not a number", f[2])))?;
            out.insert(f[0], eps, sigma).map_err(|e| perr(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# type_tag eps_is sigma_is\n");
        for (tag, p) in self.iter() {
            s.push_str(&format!("{tag} {} {}\n", p.eps, p.sigma));
        }
        s
    }

    /// Carbon and hydrogen defaults for alkane-like solutes. Sigma is the atom
    /// radius plus the 0.65 Å probe.
    pub fn alkane_defaults() -> Self {
        let mut lj = Self::new();
        lj.insert("C", 0.486, 2.52).expect("valid default");
        lj.insert("H", 0.0, 1.85).expect("valid default");
        lj
    }
}

/// One mobile ion species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    /// Bulk number density (Å⁻³).
    pub concentration: f64,
    /// Valence (e).
    pub charge: f64,
}

/// Mobile ions plus the inverse thermal energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ions {
    pub species: Vec<IonSpecies>,
    /// Inverse thermal energy (mol/kcal).
    pub beta: f64,
}

impl Default for Ions {
    fn default() -> Self {
        Self {
            species: Vec::new(),
            beta: 1.0 / KT_298,
        }
    }
}

impl Ions {
    /// Symmetric z:z salt at the given molar concentration.
    pub fn symmetric_salt(molar: f64, valence: f64) -> Self {
        let c = molar * MOLAR_TO_PER_A3;
        Self {
            species: vec![
                IonSpecies { concentration: c, charge: valence },
                IonSpecies { concentration: c, charge: -valence },
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        let mut net = 0.0;
        let mut scale = 0.0;
        for s in &self.species {
            if !(s.concentration >= 0.0) || !s.concentration.is_finite() || !s.charge.is_finite() {
                return Err(Error::Config("ion concentrations must be finite and >= 0".into()));
            }
            net += s.concentration * s.charge;
            scale += (s.concentration * s.charge).abs();
        }
        if net.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Config(format!(
                "ion species are not electroneutral: sum c_j q_j = {net:e}"
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.species.iter().all(|s| s.concentration == 0.0)
    }

    /// Boltzmann factor `exp(-β q s)` with its first two derivatives in the
    /// exponent. Above the clamp the factor continues linearly (C¹), below it
    /// is held constant, so B, B' and B'' stay mutually consistent.
    #[inline]
    fn factor(&self, s: f64, q: f64) -> (f64, f64, f64) {
        let x = -self.beta * q * s;
        if x > BOLTZMANN_EXP_CLAMP {
            let e = BOLTZMANN_EXP_CLAMP.exp();
            (e * (1.0 + x - BOLTZMANN_EXP_CLAMP), e, 0.0)
        } else if x < -BOLTZMANN_EXP_CLAMP {
            ((-BOLTZMANN_EXP_CLAMP).exp(), 0.0, 0.0)
        } else {
            let e = x.exp();
            (e, e, e)
        }
    }

    /// True when some species' Boltzmann exponent hits the clamp at `s`.
    pub fn saturates(&self, s: f64) -> bool {
        self.species
            .iter()
            .any(|sp| sp.concentration > 0.0 && (self.beta * sp.charge * s).abs() > BOLTZMANN_EXP_CLAMP)
    }

    /// Ionic free-energy density `β⁻¹ Σ c_j (exp(-β q_j s) - 1)`.
    pub fn b(&self, s: f64) -> f64 {
        let sum: f64 = self
            .species
            .iter()
            .map(|sp| sp.concentration * (self.factor(s, sp.charge).0 - 1.0))
            .sum();
        sum / self.beta
    }

    /// First derivative, `-Σ c_j q_j exp(-β q_j s)`.
    pub fn b_prime(&self, s: f64) -> f64 {
        -self
            .species
            .iter()
            .map(|sp| sp.concentration * sp.charge * self.factor(s, sp.charge).1)
            .sum::<f64>()
    }

    /// Second derivative, `β Σ c_j q_j² exp(-β q_j s)`.
    pub fn b_second(&self, s: f64) -> f64 {
        self.beta
            * self
                .species
                .iter()
                .map(|sp| sp.concentration * sp.charge * sp.charge * self.factor(s, sp.charge).2)
                .sum::<f64>()
    }

    /// `β Σ c_j q_j²`, the linear screening strength.
    pub fn ionic_strength_term(&self) -> f64 {
        self.beta
            * self
                .species
                .iter()
                .map(|sp| sp.concentration * sp.charge * sp.charge)
                .sum::<f64>()
    }
}

/// Free-function form of [`Ions::b`].
pub fn ionic_b(s: f64, ions: &Ions) -> f64 {
    ions.b(s)
}

/// Free-function form of [`Ions::b_prime`].
pub fn ionic_b_prime(s: f64, ions: &Ions) -> f64 {
    ions.b_prime(s)
}

/// Model and environment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    /// Surface tension γ (kcal/(mol·Å²)).
    pub gamma: f64,
    /// Hydrodynamic pressure P_h (kcal/(mol·Å³)).
    pub pressure: f64,
    /// Solvent bulk density ρ_s (Å⁻³).
    pub solvent_density: f64,
    /// Solute dielectric constant.
    pub eps_m: f64,
    /// Solvent dielectric constant.
    pub eps_s: f64,
    /// Integer N > 1 defining the volume-ratio exponent p = 2N/(2N-1).
    pub n_exponent: u32,
    /// Exponent of the gradient energy, in (1, eps_s/(eps_s - eps_m)).
    pub q_k: f64,
    /// Solvent probe radius (Å).
    pub probe_radius: f64,
    /// Coulomb conversion constant k_e (kcal·Å/(mol·e²)).
    pub coulomb: f64,
    pub ions: Ions,
    pub lj: LjParams,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            gamma: 0.0746,
            pressure: 0.0090,
            solvent_density: 0.03341,
            eps_m: 1.0,
            eps_s: 80.0,
            n_exponent: 40,
            q_k: 1.00001,
            probe_radius: 0.65,
            coulomb: COULOMB_KCAL,
            ions: Ions::default(),
            lj: LjParams::alkane_defaults(),
        }
    }
}

impl PhysicalParams {
    /// Volume-ratio exponent `2N/(2N-1)`.
    pub fn p(&self) -> f64 {
        let n = self.n_exponent as f64;
        2.0 * n / (2.0 * n - 1.0)
    }

    /// Largest admissible q_k (exclusive).
    pub fn q_upper_bound(&self) -> f64 {
        if self.eps_s > self.eps_m {
            self.eps_s / (self.eps_s - self.eps_m)
        } else {
            f64::INFINITY
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma", self.gamma),
            ("pressure", self.pressure),
            ("solvent_density", self.solvent_density),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.eps_m > 0.0) || !(self.eps_s >= self.eps_m) || !self.eps_s.is_finite() {
            return Err(Error::Config(format!(
                "dielectric constants must satisfy 0 < eps_m <= eps_s, got {} and {}",
                self.eps_m, self.eps_s
            )));
        }
        if self.n_exponent < 2 {
            return Err(Error::Config(format!("N must be an integer > 1, got {}", self.n_exponent)));
        }
        let hi = self.q_upper_bound();
        if !(self.q_k > 1.0 && self.q_k < hi) {
            return Err(Error::Config(format!(
                "q_k = {} must lie in (1, {hi})",
                self.q_k
            )));
        }
        if !(self.probe_radius > 0.0) {
            return Err(Error::Config("probe radius must be positive".into()));
        }
        if !(self.coulomb > 0.0) {
            return Err(Error::Config("Coulomb constant must be positive".into()));
        }
        self.ions.validate()
    }

    /// Mixture dielectric `u^p eps_m + (1 - u^p) eps_s` with `u` clamped to [0, 1].
    #[inline]
    pub fn dielectric_at(&self, u: f64) -> f64 {
        let up = u.clamp(0.0, 1.0).powf(self.p());
        up * self.eps_m + (1.0 - up) * self.eps_s
    }

    /// Debye screening parameter κ (Å⁻¹) of the bulk solvent.
    pub fn debye_kappa(&self) -> f64 {
        (4.0 * std::f64::consts::PI * self.coulomb * self.ions.ionic_strength_term() / self.eps_s).sqrt()
    }
}

/// Pointwise mixture dielectric of a `u` field.
pub fn dielectric(u: &ScalarField, params: &PhysicalParams) -> ScalarField {
    let p = params.p();
    let values = u
        .values()
        .iter()
        .map(|&v| {
            let up = v.clamp(0.0, 1.0).powf(p);
            up * params.eps_m + (1.0 - up) * params.eps_s
        })
        .collect();
    ScalarField::from_values(*u.grid(), values).expect("dielectric of a finite field is finite")
}

/// Sum of per-atom WCA attractive potentials, with each atom's (eps, sigma)
/// supplied by `select`. Atoms mapped to `None` contribute nothing.
pub fn vdw_field_with(
    molecule: &Molecule,
    grid: &Grid,
    select: impl Fn(&Atom) -> Result<Option<LjPair>> + Sync,
) -> Result<ScalarField> {
    let per_atom: Vec<Option<LjPair>> = molecule.atoms().iter().map(&select).collect::<Result<_>>()?;
    let h = grid.spacing();
    let atoms = molecule.atoms();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.position_of(idx);
            atoms
                .iter()
                .zip(&per_atom)
                .filter_map(|(a, lj)| lj.map(|lj| (a, lj)))
                .map(|(a, lj)| {
                    let mut r = distance(x, a.position);
                    if r < 1e-9 * h {
                        r = 0.5 * h;
                    }
                    wca_attractive(r, lj.eps, lj.sigma).expect("r > 0 after clamp")
                })
                .sum()
        })
        .collect();
    ScalarField::from_values(*grid, values)
}

/// Attractive dispersion field `Σ_i U_i^att(x)` on the grid.
pub fn vdw_field(molecule: &Molecule, lj: &LjParams, grid: &Grid) -> Result<ScalarField> {
    vdw_field_with(molecule, grid, |a| lj.lookup(&a.type_tag).map(Some))
}

/// Dispersion field of the atoms carrying `tag`, evaluated with unit well depth.
/// The full field is linear in each tag's well depth with this as coefficient.
pub fn vdw_field_unit_eps(molecule: &Molecule, lj: &LjParams, grid: &Grid, tag: &str) -> Result<ScalarField> {
    vdw_field_with(molecule, grid, |a| {
        if a.type_tag == tag {
            let sigma = lj.lookup(tag)?.sigma;
            Ok(Some(LjPair { eps: 1.0, sigma }))
        } else {
            Ok(None)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use approx::assert_relative_eq;

    #[test]
    fn lj_landmarks() {
        assert_relative_eq!(lj_potential(2.5, 0.3, 2.5).unwrap(), 0.0, epsilon = 1e-15);
        let rmin = wca_splice_factor() * 2.5;
        assert_relative_eq!(lj_potential(rmin, 0.3, 2.5).unwrap(), -0.3, epsilon = 1e-14);
        // (2.52/3)^6 = 0.35131, so 4*0.486*(0.12342 - 0.35131) = -0.4430
        let s6: f64 = (2.52f64 / 3.0).powi(6);
        let expected = 4.0 * 0.486 * (s6 * s6 - s6);
        assert_relative_eq!(lj_potential(3.0, 0.486, 2.52).unwrap(), expected, max_relative = 1e-15);
        assert_relative_eq!(expected, -0.4430, epsilon = 2e-4);
        assert!(lj_potential(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn wca_branches() {
        assert_eq!(wca_attractive(0.5 * 2.0, 0.7, 2.0).unwrap(), -0.7);
        let r = wca_splice_factor() * 2.0;
        assert_relative_eq!(wca_attractive(r, 0.7, 2.0).unwrap(), -0.7, epsilon = 1e-14);
        assert_relative_eq!(wca_attractive(r * (1.0 - 1e-12), 0.7, 2.0).unwrap(), -0.7);
        let far = wca_attractive(1e3, 0.7, 2.0).unwrap();
        assert!(far < 0.0 && far > -1e-12);
        assert!(wca_attractive(0.0, 0.7, 2.0).is_err());
        assert!(wca_attractive(-1.0, 0.7, 2.0).is_err());
    }

    #[test]
    fn ionic_b_basics() {
        let salt = Ions::symmetric_salt(0.15, 1.0);
        salt.validate().unwrap();
        assert_eq!(salt.b(0.0), 0.0);
        assert_relative_eq!(salt.b_prime(0.0), 0.0, epsilon = 1e-20);
        for s in [0.1, 0.7, 2.3] {
            assert_relative_eq!(salt.b(s), salt.b(-s), max_relative = 1e-14);
            // direct two-species sum: c (e^{-βs} - 1) + c (e^{βs} - 1), over β
            let c = 0.15 * MOLAR_TO_PER_A3;
            let beta = salt.beta;
            let direct = c * ((-beta * s).exp() + (beta * s).exp() - 2.0) / beta;
            assert_relative_eq!(salt.b(s), direct, max_relative = 1e-13);
        }
        let empty = Ions::default();
        assert_eq!(empty.b(3.0), 0.0);
        assert_eq!(empty.b_prime(3.0), 0.0);
    }

    #[test]
    fn b_prime_matches_central_differences() {
        let ions = Ions {
            species: vec![
                IonSpecies { concentration: 2e-4, charge: 2.0 },
                IonSpecies { concentration: 4e-4, charge: -1.0 },
            ],
            beta: 1.0 / KT_298,
        };
        ions.validate().unwrap();
        for s in [-1.3, -0.2, 0.0, 0.4, 1.1] {
            let d = 1e-4;
            let fd = (ions.b(s + d) - ions.b(s - d)) / (2.0 * d);
            assert_relative_eq!(ions.b_prime(s), fd, max_relative = 1e-6, epsilon = 1e-10);
            let fd2 = (ions.b_prime(s + d) - ions.b_prime(s - d)) / (2.0 * d);
            assert_relative_eq!(ions.b_second(s), fd2, max_relative = 1e-6);
        }
    }

    #[test]
    fn non_neutral_ions_rejected() {
        let ions = Ions {
            species: vec![IonSpecies { concentration: 1e-4, charge: 1.0 }],
            ..Ions::default()
        };
        assert!(ions.validate().is_err());
    }

    #[test]
    fn exponent_clamp_flags() {
        let salt = Ions::symmetric_salt(0.1, 1.0);
        assert!(!salt.saturates(1.0));
        assert!(salt.saturates(100.0));
        assert!(salt.b(1e6).is_finite());
    }

    #[test]
    fn dielectric_limits_and_midpoint() {
        let params = PhysicalParams {
            eps_m: 1.0,
            eps_s: 80.0,
            n_exponent: 40,
            ..PhysicalParams::default()
        };
        assert_relative_eq!(params.p(), 80.0 / 79.0);
        assert_eq!(params.dielectric_at(1.0), 1.0);
        assert_eq!(params.dielectric_at(0.0), 80.0);
        let up = 0.5f64.powf(80.0 / 79.0);
        assert_relative_eq!(params.dielectric_at(0.5), up + (1.0 - up) * 80.0);
        assert_relative_eq!(params.dielectric_at(0.5), 40.845, epsilon = 0.001);
    }

    #[test]
    fn params_validation() {
        let mut p = PhysicalParams::default();
        p.validate().unwrap();
        p.q_k = 1.0;
        assert!(p.validate().is_err());
        p.q_k = 80.0 / 79.0;
        assert!(p.validate().is_err());
        p.q_k = 1.001;
        p.n_exponent = 1;
        assert!(p.validate().is_err());
        p.n_exponent = 5;
        p.gamma = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn vdw_field_superposition() {
        let lj = LjParams::alkane_defaults();
        let one = Molecule::new(vec![Atom::new([-2.0, 0.0, 0.0], 0.0, 1.87, "C")]).unwrap();
        let two = Molecule::new(vec![
            Atom::new([-2.0, 0.0, 0.0], 0.0, 1.87, "C"),
            Atom::new([2.0, 0.0, 0.0], 0.0, 1.87, "C"),
        ])
        .unwrap();
        let g = build_grid(&two, 0.5, 0.65, 3.0).unwrap();
        let f1 = vdw_field(&one, &lj, &g).unwrap();
        let f2 = vdw_field(&two, &lj, &g).unwrap();
        // node on the mid-plane x = 0
        let (cell, _) = g.locate([0.0, 0.0, 0.0]).unwrap();
        let idx = g.index(cell[0], cell[1], cell[2]);
        assert_relative_eq!(f2.values()[idx], 2.0 * f1.values()[idx], max_relative = 1e-14);
        let unknown = Molecule::new(vec![Atom::new([0.0; 3], 0.0, 1.0, "Xx")]).unwrap();
        let err = vdw_field(&unknown, &lj, &g).unwrap_err();
        assert!(err.to_string().contains("Xx"));
    }

    #[test]
    fn lj_table_parse() {
        let lj = LjParams::parse("# t eps sigma\nC 0.486 2.52\nO 0.2 2.3\n", "lj").unwrap();
        assert_eq!(lj.get("O"), Some(LjPair { eps: 0.2, sigma: 2.3 }));
        assert_eq!(LjParams::parse(&lj.to_text(), "rt").unwrap(), lj);
        assert!(LjParams::parse("C 0.1\n", "lj").is_err());
        assert!(LjParams::parse("C -0.1 2.0\n", "lj").is_err());
    }
}
