//! Run configuration: a TOML file, overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vism::physics::Ions;
use vism::{CouplingConfig, EvolutionConfig, FitConfig, LjParams, PhysicalParams};

/// Symmetric z:z salt, a shorthand for `params.ions`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Salt {
    /// Molar concentration of each species.
    pub molar: f64,
    #[serde(default = "unit")]
    pub valence: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub q_values: Vec<f64>,
    pub n_values: Vec<u32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            q_values: vec![1.01, 1.001, 1.0001, 1.00001, 1.000001],
            n_values: vec![5, 10, 20, 40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BornConfig {
    pub charge: f64,
    pub radius: f64,
    /// Spacings, coarse to fine.
    pub h_values: Vec<f64>,
    pub pad: f64,
}

impl Default for BornConfig {
    fn default() -> Self {
        Self {
            charge: 1.0,
            radius: 2.0,
            h_values: vec![1.0, 0.5, 0.25],
            pad: 6.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub molecule: Option<PathBuf>,
    /// Fit manifest.
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// `type_tag eps sigma` file replacing `params.lj`.
    pub lj_table: Option<PathBuf>,
    pub threads: Option<usize>,
    pub dump_fields: bool,
    pub csv: bool,
    pub salt: Option<Salt>,
    pub params: PhysicalParams,
    pub coupling: CouplingConfig,
    pub evolution: EvolutionConfig,
    pub fit: FitConfig,
    pub sweep: SweepConfig,
    pub born: BornConfig,
}

impl RunConfig {
    /// Parses a config file; relative paths inside it are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.molecule, &mut cfg.manifest, &mut cfg.out, &mut cfg.lj_table]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Folds the shorthands (`salt`, `lj_table`) into `params`, makes paths
    /// absolute and range-checks everything. The result serializes to a
    /// self-contained config that reproduces the run.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.salt.take() {
            if !(s.molar >= 0.0) || !(s.valence > 0.0) {
                bail!("salt needs molar >= 0 and valence > 0");
            }
            self.params.ions = if s.molar == 0.0 {
                Ions {
                    species: Vec::new(),
                    ..self.params.ions
                }
            } else {
                Ions {
                    beta: self.params.ions.beta,
                    ..Ions::symmetric_salt(s.molar, s.valence)
                }
            };
        }
        if let Some(p) = self.lj_table.take() {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            self.params.lj = LjParams::parse(&text, &p.display().to_string())?;
        }
        for p in [&mut self.molecule, &mut self.manifest, &mut self.out].into_iter().flatten() {
            *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        self.params.validate()?;
        self.coupling.validate()?;
        self.evolution.validate()?;
        self.fit.validate()?;
        let b = &self.born;
        if !(b.radius > 0.0) || !(b.pad > 0.0) || b.h_values.len() < 2 || b.h_values.iter().any(|h| !(*h > 0.0)) {
            bail!("born needs a positive radius and pad and at least two positive spacings");
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_take_defaults() {
        let cfg: RunConfig = toml::from_str("[params]\ngamma = 0.1\n[coupling.grid]\nh = 0.25\n").unwrap();
        assert_eq!(cfg.params.gamma, 0.1);
        assert_eq!(cfg.params.pressure, PhysicalParams::default().pressure);
        assert_eq!(cfg.coupling.grid.h, 0.25);
        assert_eq!(cfg.coupling.grid.pad, CouplingConfig::default().grid.pad);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("gama = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[params]\ngama = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[coupling.pb]\ntol2 = 1\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig {
            salt: Some(Salt { molar: 0.15, valence: 1.0 }),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert!(cfg.salt.is_none());
        assert_eq!(cfg.params.ions.species.len(), 2);
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn range_errors_surface_before_solving() {
        let mut cfg = RunConfig::default();
        cfg.params.eps_s = -1.0;
        assert!(cfg.resolve().is_err());
        let mut cfg = RunConfig::default();
        cfg.coupling.alpha = 2.0;
        assert!(cfg.resolve().is_err());
    }
}
