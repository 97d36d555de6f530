//! Exact rational arithmetic for small instances.
//!
//! Mirrors the float engine without truncation or transforms; used as an
//! independent reference for depths up to about 6.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pmf::{LatticePmf, LatticeStep};

pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Finite-support offspring law with rational probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactOffspring {
    probs: Vec<(u32, BigRational)>,
}

impl ExactOffspring {
    pub fn new<I: IntoIterator<Item = (u32, BigRational)>>(items: I) -> Result<Self> {
        let mut map: BTreeMap<u32, BigRational> = BTreeMap::new();
        for (k, p) in items {
            if k == 0 || p < BigRational::zero() {
                return Err(Error::InvalidOffspring(format!("bad entry ({k}, {p})")));
            }
            *map.entry(k).or_insert_with(BigRational::zero) += p;
        }
        map.retain(|_, p| !p.is_zero());
        let total: BigRational = map.values().sum();
        if !total.is_one() {
            return Err(Error::InvalidOffspring(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs: map.into_iter().collect() })
    }

    pub fn probs(&self) -> &[(u32, BigRational)] {
        &self.probs
    }

    pub fn mean(&self) -> BigRational {
        self.probs
            .iter()
            .map(|(k, p)| p * BigRational::from_integer(BigInt::from(*k)))
            .sum()
    }
}

/// Exact probability mass function on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPmf {
    step: LatticeStep,
    masses: BTreeMap<usize, BigRational>,
}

impl ExactPmf {
    pub fn new<I: IntoIterator<Item = (usize, BigRational)>>(step: LatticeStep, items: I) -> Result<Self> {
        let mut masses: BTreeMap<usize, BigRational> = BTreeMap::new();
        for (k, m) in items {
            if m < BigRational::zero() {
                return Err(Error::InvalidDistribution(format!("negative mass at {k}")));
            }
            *masses.entry(k).or_insert_with(BigRational::zero) += m;
        }
        masses.retain(|_, m| !m.is_zero());
        let total: BigRational = masses.values().sum();
        if !total.is_one() {
            return Err(Error::InvalidDistribution(format!("total mass {total}")));
        }
        Ok(Self { step, masses })
    }

    pub fn point(step: LatticeStep, k: usize) -> Self {
        Self { step, masses: BTreeMap::from([(k, BigRational::one())]) }
    }

    /// `(1 - p) delta_0 + p y0`.
    pub fn initial(y0: &ExactPmf, p: &BigRational) -> Result<Self> {
        if *p < BigRational::zero() || *p > BigRational::one() {
            return Err(Error::InvalidModel(format!("p = {p} outside [0, 1]")));
        }
        if y0.masses.contains_key(&0) {
            return Err(Error::InvalidModel("y0 must put no mass at 0".into()));
        }
        let mut masses = BTreeMap::new();
        let q = BigRational::one() - p;
        if !q.is_zero() {
            masses.insert(0, q);
        }
        if !p.is_zero() {
            for (k, m) in &y0.masses {
                masses.insert(*k, p * m);
            }
        }
        Ok(Self { step: y0.step, masses })
    }

    pub fn step(&self) -> LatticeStep {
        self.step
    }

    pub fn masses(&self) -> &BTreeMap<usize, BigRational> {
        &self.masses
    }

    pub fn mass(&self, k: usize) -> BigRational {
        self.masses.get(&k).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn convolve(&self, other: &ExactPmf) -> Result<ExactPmf> {
        if self.step != other.step {
            return Err(Error::StepMismatch { left: self.step.to_string(), right: other.step.to_string() });
        }
        let mut out: BTreeMap<usize, BigRational> = BTreeMap::new();
        for (i, a) in &self.masses {
            for (j, b) in &other.masses {
                *out.entry(i + j).or_insert_with(BigRational::zero) += a * b;
            }
        }
        Ok(Self { step: self.step, masses: out })
    }

    pub fn dr_step(&self, nu: &ExactOffspring) -> Result<ExactPmf> {
        let shift = self
            .step
            .steps_per_unit()
            .ok_or_else(|| Error::StepDoesNotDivideOne(self.step.to_string()))?;
        let mut out: BTreeMap<usize, BigRational> = BTreeMap::new();
        let mut power = self.clone();
        let mut k_done = 1;
        for (k, pk) in nu.probs() {
            while k_done < *k {
                power = power.convolve(self)?;
                k_done += 1;
            }
            for (i, m) in &power.masses {
                *out.entry(i.saturating_sub(shift)).or_insert_with(BigRational::zero) += pk * m;
            }
        }
        Ok(Self { step: self.step, masses: out })
    }

    pub fn mean(&self) -> BigRational {
        let h = BigRational::new(BigInt::from(self.step.num()), BigInt::from(self.step.den()));
        self.masses
            .iter()
            .map(|(k, m)| m * BigRational::from_integer(BigInt::from(*k)) * &h)
            .sum()
    }

    pub fn to_lattice_pmf(&self) -> LatticePmf {
        LatticePmf::from_masses(self.step, self.masses.iter().map(|(k, m)| (*k, m.to_f64().unwrap_or(0.0))))
            .expect("exact law converts to float law")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dr_step_matches_hand_enumeration() {
        let x0 = ExactPmf::new(LatticeStep::UNIT, [(0, ratio(1, 2)), (2, ratio(1, 2))]).unwrap();
        let nu = ExactOffspring::new([(2, ratio(1, 1))]).unwrap();
        let x1 = x0.dr_step(&nu).unwrap();
        assert_eq!(x1.mass(0), ratio(1, 4));
        assert_eq!(x1.mass(1), ratio(1, 2));
        assert_eq!(x1.mass(3), ratio(1, 4));
        assert_eq!(x1.mean(), ratio(5, 4));
    }

    #[test]
    fn initial_mixture() {
        let y0 = ExactPmf::point(LatticeStep::UNIT, 2);
        let x0 = ExactPmf::initial(&y0, &ratio(1, 5)).unwrap();
        assert_eq!(x0.mass(0), ratio(4, 5));
        assert_eq!(x0.mass(2), ratio(1, 5));
        assert!(ExactPmf::initial(&y0, &ratio(6, 5)).is_err());
    }

    #[test]
    fn offspring_validation() {
        assert!(ExactOffspring::new([(1, ratio(1, 2)), (3, ratio(1, 3))]).is_err());
        let nu = ExactOffspring::new([(1, ratio(1, 2)), (3, ratio(1, 2))]).unwrap();
        assert_eq!(nu.mean(), ratio(2, 1));
    }
}
