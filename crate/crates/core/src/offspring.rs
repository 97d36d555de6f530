//! Offspring law of the number of independent copies summed per step.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Finite-support law on `{1, 2, ...}` with mean strictly above one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct OffspringLaw {
    /// `(k, P(nu = k))`, sorted by `k`, all probabilities positive.
    probs: Vec<(u32, f64)>,
    mean: f64,
}

impl OffspringLaw {
    pub fn new<I: IntoIterator<Item = (u32, f64)>>(masses: I) -> Result<Self> {
        let mut map: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, p) in masses {
            if k == 0 {
                return Err(Error::InvalidOffspring("support must be in {1,2,...}".into()));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::InvalidOffspring(format!("P(nu={k}) = {p} is not a probability")));
            }
            *map.entry(k).or_insert(0.0) += p;
        }
        let probs: Vec<(u32, f64)> = map.into_iter().filter(|&(_, p)| p > 0.0).collect();
        if probs.is_empty() {
            return Err(Error::InvalidOffspring("empty support".into()));
        }
        let total: f64 = probs.iter().map(|x| x.1).sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidOffspring(format!("probabilities sum to {total}")));
        }
        let mean: f64 = probs.iter().map(|&(k, p)| k as f64 * p).sum();
        if mean <= 1.0 + 1e-15 {
            return Err(Error::InvalidOffspring(format!("mean {mean} must exceed 1")));
        }
        Ok(Self { probs, mean })
    }

    /// `nu = m` almost surely.
    pub fn deterministic(m: u32) -> Result<Self> {
        Self::new([(m, 1.0)])
    }

    /// Uniform on the given values.
    pub fn uniform(values: &[u32]) -> Result<Self> {
        let w = 1.0 / values.len() as f64;
        Self::new(values.iter().map(|&k| (k, w)))
    }

    pub fn probs(&self) -> &[(u32, f64)] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn max_k(&self) -> u32 {
        self.probs.last().map(|x| x.0).unwrap_or(0)
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.len() == 1
    }

    /// `m` as an integer when `nu` is deterministic.
    pub fn deterministic_value(&self) -> Option<u32> {
        self.is_deterministic().then(|| self.probs[0].0)
    }

    /// Probability generating function `h(x) = E(x^nu)`.
    pub fn pgf(&self, x: f64) -> f64 {
        self.probs.iter().map(|&(k, p)| p * x.powi(k as i32)).sum()
    }

    /// `h'(x)`.
    pub fn pgf_deriv(&self, x: f64) -> f64 {
        self.probs
            .iter()
            .map(|&(k, p)| p * k as f64 * x.powi(k as i32 - 1))
            .sum()
    }

    /// Size-biased law `k P(nu = k) / m`.
    pub fn size_biased(&self) -> Vec<(u32, f64)> {
        self.probs
            .iter()
            .map(|&(k, p)| (k, k as f64 * p / self.mean))
            .collect()
    }

    /// `(1/m) sum k(k-1) P(nu=k)`: expected number of brothers of a spine vertex.
    pub fn mean_brothers(&self) -> f64 {
        self.probs
            .iter()
            .map(|&(k, p)| k as f64 * (k as f64 - 1.0) * p)
            .sum::<f64>()
            / self.mean
    }

    /// Smallest `c` with `h(1+a) - 1 <= m a (1 + c a)` for all `a` in `[0, a_max]`.
    ///
    /// `(h(1+a) - 1 - m a) / a^2` is a polynomial in `a` with nonnegative
    /// coefficients, so the supremum sits at `a_max`.
    pub fn local_quadratic_constant(&self, a_max: f64) -> f64 {
        let a = a_max.max(0.0);
        let mut acc = 0.0;
        for &(k, p) in &self.probs {
            // sum_{j>=2} C(k, j) a^{j-2}
            let mut binom = 1.0;
            let mut apow = 1.0;
            let mut inner = 0.0;
            for j in 1..=k {
                binom = binom * (k - j + 1) as f64 / j as f64;
                if j >= 2 {
                    inner += binom * apow;
                    apow *= a;
                }
            }
            acc += p * inner;
        }
        acc / self.mean
    }

    /// Smallest `c` with `h'(1+a) <= m + c a` for all `a` in `[0, a_max]`.
    pub fn local_derivative_constant(&self, a_max: f64) -> f64 {
        let a = a_max.max(0.0);
        let mut acc = 0.0;
        for &(k, p) in &self.probs {
            // (h'(1+a) - m)/a contribution: k * sum_{j>=1} C(k-1, j) a^{j-1}
            let km1 = k - 1;
            let mut binom = 1.0;
            let mut apow = 1.0;
            let mut inner = 0.0;
            for j in 1..=km1 {
                binom = binom * (km1 - j + 1) as f64 / j as f64;
                inner += binom * apow;
                apow *= a;
            }
            acc += p * k as f64 * inner;
        }
        acc
    }
}

impl TryFrom<BTreeMap<String, f64>> for OffspringLaw {
    type Error = Error;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self> {
        let mut items = Vec::with_capacity(map.len());
        for (k, p) in map {
            let k: u32 = k
                .trim()
                .parse()
                .map_err(|_| Error::InvalidOffspring(format!("bad offspring value {k:?}")))?;
            items.push((k, p));
        }
        Self::new(items)
    }
}

impl From<OffspringLaw> for BTreeMap<String, f64> {
    fn from(law: OffspringLaw) -> Self {
        law.probs.iter().map(|&(k, p)| (k.to_string(), p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_laws() {
        assert!(OffspringLaw::new([(1, 1.0)]).is_err());
        assert!(OffspringLaw::new([(0, 0.5), (2, 0.5)]).is_err());
        assert!(OffspringLaw::new([(2, 0.5), (3, 0.4)]).is_err());
        assert!(OffspringLaw::new([(2, -0.1), (3, 1.1)]).is_err());
    }

    #[test]
    fn size_biased_uniform_one_two() {
        let nu = OffspringLaw::uniform(&[1, 2]).unwrap();
        assert!((nu.mean() - 1.5).abs() < 1e-15);
        let sb = nu.size_biased();
        assert!((sb[0].1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((sb[1].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_constant_binary_is_half() {
        let nu = OffspringLaw::deterministic(2).unwrap();
        for a in [0.0, 0.3, 5.0] {
            assert!((nu.local_quadratic_constant(a) - 0.5).abs() < 1e-15);
        }
        assert!((nu.local_derivative_constant(0.7) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_constant_bounds_pgf() {
        let nu = OffspringLaw::new([(1, 0.3), (3, 0.5), (4, 0.2)]).unwrap();
        let m = nu.mean();
        let amax = 0.8;
        let c = nu.local_quadratic_constant(amax);
        let cd = nu.local_derivative_constant(amax);
        for i in 1..=100 {
            let a = amax * i as f64 / 100.0;
            assert!(nu.pgf(1.0 + a) - 1.0 <= m * a * (1.0 + c * a) * (1.0 + 1e-13));
            assert!(nu.pgf_deriv(1.0 + a) <= (m + cd * a) * (1.0 + 1e-13));
        }
        // tight at the endpoint
        assert!((nu.pgf(1.0 + amax) - 1.0 - m * amax * (1.0 + c * amax)).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let nu = OffspringLaw::uniform(&[1, 3]).unwrap();
        let s = serde_json::to_string(&nu).unwrap();
        let back: OffspringLaw = serde_json::from_str(&s).unwrap();
        assert_eq!(nu, back);
    }
}
