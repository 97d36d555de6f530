//! JSON run configuration shared by the CLI subcommands.
//!
//! ```json
//! {
//!   "model": {
//!     "nu": {"2": 1.0},
//!     "y0": {"2": 1.0},
//!     "p": 0.2
//!   },
//!   "run": {"n_max": 200, "tol": 1e-3, "budget": 1e-12}
//! }
//! ```
//!
//! `y0` is either a plain `{index: mass}` map on the integer lattice or a
//! lattice law `{"step": "1/2", "masses": {...}}`. A parametric tail may be
//! given instead as `"family": {"kind": "exponential", "theta": 0.35}` or
//! `{"kind": "critical", "alpha": 0.0}` with optional `m` and `k_max`.
//! Either `p` or an increasing `p_grid` selects the mixture weight.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{default_k_max, make_tail_family, FitConfig, TailFamily, TailKind};
use crate::model::ModelSpec;
use crate::offspring::OffspringLaw;
use crate::pmf::{LatticePmf, LatticeStep};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nu: OffspringLaw,
    #[serde(default)]
    pub y0: Option<Y0Config>,
    #[serde(default)]
    pub family: Option<FamilyConfig>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub p_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Y0Config {
    Lattice(LatticePmf),
    Plain(BTreeMap<String, f64>),
}

// deny_unknown_fields does not combine with flatten
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    #[serde(flatten)]
    pub kind: TailKind,
    /// Base of the critical tail; defaults to the offspring mean.
    #[serde(default)]
    pub m: Option<f64>,
    /// Chosen from the remainder target when absent.
    #[serde(default)]
    pub k_max: Option<usize>,
}

/// Numerical settings; each subcommand reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_max: usize,
    /// Depth cap for sub/supercritical certificates.
    pub certify_n_max: usize,
    pub tol: f64,
    pub budget: f64,
    /// Relative tolerance for free-energy sweeps in fits and scans.
    pub rel_tol: f64,
    pub p_lo: Option<f64>,
    pub p_hi: Option<f64>,
    pub s: Option<f64>,
    pub delta0: f64,
    pub c7: f64,
    pub c9: f64,
    pub trials: usize,
    /// Tree depth for tree checks.
    pub n: usize,
    pub b_grid: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub fit_tolerance: f64,
    pub support_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_max: 200,
            certify_n_max: 4000,
            tol: 1e-3,
            budget: 1e-12,
            rel_tol: 0.05,
            p_lo: None,
            p_hi: None,
            s: None,
            delta0: 1.0,
            c7: 1.0,
            c9: 1.0,
            trials: 100_000,
            n: 6,
            b_grid: vec![0.0, 1.0, 2.0],
            lambda1: 1.0 / 3.0,
            lambda2: 2.0 / 3.0,
            fit_tolerance: 0.3,
            support_cap: crate::engine::DEFAULT_SUPPORT_CAP,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.y0.is_some() && m.family.is_some() {
            return Err(Error::InvalidArgument("model: give either y0 or family, not both".into()));
        }
        if m.p.is_some() && m.p_grid.is_some() {
            return Err(Error::InvalidArgument("model: give either p or p_grid, not both".into()));
        }
        if let Some(g) = &m.p_grid {
            if g.is_empty() || g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument("model.p_grid must be nonempty and strictly increasing".into()));
            }
            if g.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument("model.p_grid entries must lie in [0, 1]".into()));
            }
        }
        if let Some(p) = m.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("model.p = {p} outside [0, 1]")));
            }
        }
        let r = &self.run;
        if !(r.tol > 0.0) || !(r.rel_tol > 0.0) || !(r.budget >= 0.0) {
            return Err(Error::InvalidArgument("run.tol and run.rel_tol must be positive, run.budget nonnegative".into()));
        }
        Ok(())
    }

    pub fn y0(&self) -> Result<LatticePmf> {
        match (&self.model.y0, &self.model.family) {
            (Some(Y0Config::Lattice(l)), _) => Ok(l.clone()),
            (Some(Y0Config::Plain(map)), _) => {
                let mut items = Vec::with_capacity(map.len());
                for (k, &v) in map {
                    let idx: usize = k
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("model.y0: bad value {k:?}")))?;
                    items.push((idx, v));
                }
                LatticePmf::from_masses(LatticeStep::UNIT, items)
            }
            (None, Some(_)) => Ok(self.family()?.pmf),
            (None, None) => Err(Error::InvalidArgument("model needs y0 or family".into())),
        }
    }

    /// Tail family; `k_max` defaults to [`default_k_max`] at the smallest
    /// positive `p`.
    pub fn family(&self) -> Result<TailFamily> {
        let f = self
            .model
            .family
            .ok_or_else(|| Error::InvalidArgument("model.family is required here".into()))?;
        let base = f.m.unwrap_or_else(|| self.model.nu.mean());
        let k_max = match f.k_max {
            Some(k) => k,
            None => {
                let p_min = self.p_values()?.into_iter().filter(|&p| p > 0.0).fold(1.0, f64::min);
                default_k_max(f.kind, base, p_min, &FitConfig::default())?
            }
        };
        make_tail_family(f.kind, base, k_max)
    }

    /// `p` or the grid, as a list.
    pub fn p_values(&self) -> Result<Vec<f64>> {
        match (&self.model.p, &self.model.p_grid) {
            (Some(p), None) => Ok(vec![*p]),
            (None, Some(g)) => Ok(g.clone()),
            _ => Err(Error::InvalidArgument("model needs p or p_grid".into())),
        }
    }

    pub fn p(&self) -> Result<f64> {
        self.model.p.ok_or_else(|| Error::InvalidArgument("model.p is required here".into()))
    }

    /// Model at a given `p`, with tail metadata when a family is configured.
    pub fn spec_at(&self, p: f64) -> Result<ModelSpec> {
        let spec = ModelSpec::new(self.model.nu.clone(), self.y0()?, p)?;
        Ok(match self.model.family {
            Some(f) => spec.with_tail(f.kind.meta()),
            None => spec,
        })
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        self.spec_at(self.p()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plain_model() {
        let c = Config::from_json(r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 0.2}}"#).unwrap();
        let s = c.spec().unwrap();
        assert_eq!(s.m(), 2.0);
        assert_eq!(s.y0().mass(2), 1.0);
        assert_eq!(c.run.n_max, 200);
    }

    #[test]
    fn parses_lattice_and_family() {
        let c = Config::from_json(
            r#"{"model": {"nu": {"2": 1.0}, "y0": {"step": "1/2", "masses": {"3": 1.0}}, "p": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(c.y0().unwrap().step(), LatticeStep::new(1, 2).unwrap());
        let c = Config::from_json(
            r#"{"model": {"nu": {"2": 1.0}, "family": {"kind": "critical", "alpha": 0.0, "k_max": 8}, "p_grid": [0.01, 0.1]}}"#,
        )
        .unwrap();
        assert_eq!(c.family().unwrap().k_max, 8);
        assert!(c.spec_at(0.1).unwrap().tail().is_some());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Config::from_json("{\n  \"model\": {\n    \"nu\": {\"2\": 1.0},\n    \"bogus\": 1\n  }\n}").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
        assert!(e.is_validation());
        assert!(Config::from_json(r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 0.2, "p_grid": [0.1]}}"#).is_err());
    }
}
