//! Model specification: offspring law, initial mixture and tail metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;
use crate::pmf::LatticePmf;

/// Parametric tail class of `Y_0`, when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailMeta {
    /// `P(Y_0 >= x)` comparable to `exp(-theta x)`.
    Exponential { theta: f64 },
    /// `P(Y_0 >= x)` comparable to `x^alpha m^{-x}`.
    Critical { alpha: f64 },
}

/// `X_0 ~ (1 - p) delta_0 + p P_{Y_0}` driven by offspring law `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    nu: OffspringLaw,
    y0: LatticePmf,
    p: f64,
    tail: Option<TailMeta>,
}

impl ModelSpec {
    pub fn new(nu: OffspringLaw, y0: LatticePmf, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidModel(format!("p = {p} outside [0, 1]")));
        }
        if y0.is_empty() {
            return Err(Error::InvalidModel("y0 has empty support".into()));
        }
        if y0.zero_mass() > 0.0 {
            return Err(Error::InvalidModel("y0 must put no mass at 0".into()));
        }
        if !y0.is_exact() {
            return Err(Error::InvalidModel("y0 must be an exact law".into()));
        }
        Ok(Self { nu, y0, p, tail: None })
    }

    pub fn with_tail(mut self, tail: TailMeta) -> Self {
        self.tail = Some(tail);
        self
    }

    /// Same model at a different `p`.
    pub fn with_p(&self, p: f64) -> Result<Self> {
        let mut out = Self::new(self.nu.clone(), self.y0.clone(), p)?;
        out.tail = self.tail;
        Ok(out)
    }

    pub fn nu(&self) -> &OffspringLaw {
        &self.nu
    }

    pub fn y0(&self) -> &LatticePmf {
        &self.y0
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn m(&self) -> f64 {
        self.nu.mean()
    }

    pub fn tail(&self) -> Option<TailMeta> {
        self.tail
    }
}

/// Law of `X_0`.
pub fn make_initial(spec: &ModelSpec) -> LatticePmf {
    let p = spec.p;
    let step = spec.y0.step();
    if p == 0.0 {
        return LatticePmf::delta_zero(step);
    }
    if p == 1.0 {
        return spec.y0.clone();
    }
    let items = std::iter::once((0usize, 1.0 - p)).chain(spec.y0.iter().map(|(k, m)| (k, p * m)));
    // Mixture of two normalized laws stays normalized up to rounding.
    LatticePmf::from_masses(step, items).expect("mixture of valid laws")
}
