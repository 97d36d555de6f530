//! Lattice sub-probability mass functions with certified truncation accounting.
//!
//! A [`LatticePmf`] stores the *known* part of a law on `{0, h, 2h, ...}` as a
//! dense vector, together with a [`RemainderBound`]: upper bounds on the mass,
//! the first moment, and optionally `E(s^X)` at a few tracked points `s`, of
//! everything that was removed along the way. The true law is always
//! `known + remainder`, so the known part gives certified lower bounds for
//! monotone statistics and known + remainder gives upper bounds.

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::conv;
use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;

/// Allowed drift of `sum(masses) + dropped` away from one.
pub const MASS_TOL: f64 = 1e-12;

/// Positive rational lattice spacing `num/den` in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeStep {
    num: u32,
    den: u32,
}

impl LatticeStep {
    pub const UNIT: LatticeStep = LatticeStep { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidDistribution(format!("lattice step {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    /// Step `1/l`.
    pub fn unit_fraction(l: u32) -> Result<Self> {
        Self::new(1, l)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Number of lattice steps making up one unit, when the step divides 1.
    pub fn steps_per_unit(&self) -> Option<usize> {
        (self.num == 1).then_some(self.den as usize)
    }

    pub fn is_unit(&self) -> bool {
        *self == Self::UNIT
    }
}

impl Default for LatticeStep {
    fn default() -> Self {
        Self::UNIT
    }
}

impl fmt::Display for LatticeStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for LatticeStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidDistribution(format!("bad lattice step {s:?}"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Self::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Upper bounds on the moments of the removed (unknown) part of a law.
///
/// `gf[i]` bounds `E(s_i^X ; removed)` for the `i`-th tracked point of the
/// owning pmf.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RemainderBound {
    pub mass: f64,
    pub mean: f64,
    pub gf: Vec<f64>,
}

impl RemainderBound {
    fn zero(tracked: usize) -> Self {
        Self { mass: 0.0, mean: 0.0, gf: vec![0.0; tracked] }
    }

    fn add_atom(&mut self, value: f64, mass: f64, tracked: &[f64]) {
        self.mass += mass;
        self.mean += value * mass;
        for (g, &s) in self.gf.iter_mut().zip(tracked) {
            *g += weighted_pow(mass, s, value);
        }
    }

    fn add_log_atom(&mut self, value: f64, ln_mass: f64, tracked: &[f64]) {
        let mass = ln_mass.exp();
        self.mass += mass;
        self.mean += value * mass;
        for (g, &s) in self.gf.iter_mut().zip(tracked) {
            *g += (ln_mass + value * s.ln()).exp();
        }
    }

    fn add(&mut self, other: &RemainderBound) {
        self.mass += other.mass;
        self.mean += other.mean;
        for (g, o) in self.gf.iter_mut().zip(&other.gf) {
            *g += o;
        }
    }

    fn scaled(&self, w: f64) -> RemainderBound {
        RemainderBound {
            mass: self.mass * w,
            mean: self.mean * w,
            gf: self.gf.iter().map(|g| g * w).collect(),
        }
    }
}

/// Moments of a known nonnegative measure, used to propagate remainder bounds.
#[derive(Debug, Clone)]
struct Moments {
    mass: f64,
    mean: f64,
    gf: Vec<f64>,
}

/// `(x + y)^k - x^k` without cancellation for small `y`.
fn pow_diff(x: f64, y: f64, k: u32) -> f64 {
    let mut acc = 0.0;
    let mut binom = 1.0;
    for j in 1..=k {
        binom = binom * (k - j + 1) as f64 / j as f64;
        acc += binom * x.powi((k - j) as i32) * y.powi(j as i32);
    }
    acc
}

/// Contribution of one unit of mass at value `x` to the tracked `E(s^X)`
/// bound: all of `s^x` when removed, the excess `s^x - 1` when moved to 0.
fn gf_excess(s: f64, x: f64, mass: f64, lowered: bool) -> f64 {
    if lowered {
        (weighted_pow(mass, s, x) - mass).max(0.0)
    } else {
        weighted_pow(mass, s, x)
    }
}

/// `mass * s^x`, formed in log space so tiny masses far out do not overflow.
fn weighted_pow(mass: f64, s: f64, x: f64) -> f64 {
    if mass == 0.0 || x == 0.0 {
        mass
    } else {
        (x * s.ln() + mass.ln()).exp()
    }
}

/// `ln(sum_{i < len} e^{i r})` for `len >= 1`.
fn log_geometric_sum(r: f64, len: usize) -> f64 {
    let n = len as f64;
    if r == 0.0 || len == 1 {
        n.ln()
    } else if r > 0.0 {
        (n - 1.0) * r + (-(-n * r).exp_m1()).ln() - (-(-r).exp_m1()).ln()
    } else {
        (-(n * r).exp_m1()).ln() - (-r.exp_m1()).ln()
    }
}

/// Limits on how much a single truncation may remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationBudget {
    /// Total removed mass.
    pub mass: f64,
    /// Total removed first moment (value units).
    pub mean: f64,
    /// Total removed `E(s^X)` at every tracked point.
    pub gf: f64,
}

impl TruncationBudget {
    pub fn mass_only(mass: f64) -> Self {
        Self { mass, mean: f64::INFINITY, gf: f64::INFINITY }
    }
}

/// Finite sub-probability mass function on a nonnegative lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePmf {
    step: LatticeStep,
    /// Lattice index of `masses[0]`.
    offset: usize,
    /// Dense masses; first and last entries are nonzero unless empty.
    masses: Vec<f64>,
    remainder: RemainderBound,
    /// Mass moved down by [`LatticePmf::lower_tail_with`] or after underflow.
    lowered: f64,
    /// Points `s` at which `remainder.gf` is tracked.
    tracked: Vec<f64>,
}

impl LatticePmf {
    /// Exact pmf from `(index, mass)` pairs. Masses must sum to one.
    pub fn from_masses<I: IntoIterator<Item = (usize, f64)>>(step: LatticeStep, items: I) -> Result<Self> {
        Self::from_parts(step, items, 0.0, 0.0)
    }

    /// Pmf with explicit dropped mass and mean bound.
    pub fn from_parts<I: IntoIterator<Item = (usize, f64)>>(
        step: LatticeStep,
        items: I,
        dropped: f64,
        dropped_mean_bound: f64,
    ) -> Result<Self> {
        let mut map: BTreeMap<usize, f64> = BTreeMap::new();
        for (k, m) in items {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::InvalidDistribution(format!("mass {m} at index {k}")));
            }
            *map.entry(k).or_insert(0.0) += m;
        }
        if !(dropped.is_finite() && dropped >= 0.0) || !(dropped_mean_bound.is_finite() && dropped_mean_bound >= 0.0) {
            return Err(Error::InvalidDistribution("dropped quantities must be finite and nonnegative".into()));
        }
        if dropped == 0.0 && dropped_mean_bound != 0.0 {
            return Err(Error::InvalidDistribution("dropped_mean_bound must be 0 when dropped is 0".into()));
        }
        map.retain(|_, m| *m > 0.0);
        let total: f64 = map.values().sum::<f64>() + dropped;
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!("total mass {total} differs from 1")));
        }
        let (offset, masses) = match (map.keys().next(), map.keys().next_back()) {
            (Some(&lo), Some(&hi)) => {
                let mut v = vec![0.0; hi - lo + 1];
                for (k, m) in map {
                    v[k - lo] = m;
                }
                (lo, v)
            }
            _ => (0, Vec::new()),
        };
        Ok(Self {
            step,
            offset,
            masses,
            remainder: RemainderBound { mass: dropped, mean: dropped_mean_bound, gf: Vec::new() },
            lowered: 0.0,
            tracked: Vec::new(),
        })
    }

    /// Point mass at lattice index `k`.
    pub fn point(step: LatticeStep, k: usize) -> Self {
        Self {
            step,
            offset: k,
            masses: vec![1.0],
            remainder: RemainderBound::default(),
            lowered: 0.0,
            tracked: Vec::new(),
        }
    }

    pub fn delta_zero(step: LatticeStep) -> Self {
        Self::point(step, 0)
    }

    fn from_dense(
        step: LatticeStep,
        offset: usize,
        masses: Vec<f64>,
        remainder: RemainderBound,
        lowered: f64,
        tracked: Vec<f64>,
    ) -> Self {
        let mut pmf = Self { step, offset, masses, remainder, lowered, tracked };
        pmf.trim();
        pmf
    }

    fn trim(&mut self) {
        let first = self.masses.iter().position(|&m| m > 0.0);
        match first {
            None => {
                self.masses.clear();
                self.offset = 0;
            }
            Some(f) => {
                let last = self.masses.iter().rposition(|&m| m > 0.0).unwrap_or(f);
                self.masses.truncate(last + 1);
                self.masses.drain(..f);
                self.offset += f;
            }
        }
    }

    /// Start tracking a certified bound on the removed part of `E(s^X)` at
    /// each given point. Only possible while nothing has been removed yet.
    pub fn with_tracked_gf(mut self, points: &[f64]) -> Result<Self> {
        if self.remainder.mass > 0.0 {
            return Err(Error::InvalidArgument(
                "cannot start generating-function tracking after truncation".into(),
            ));
        }
        if points.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("tracked points must be positive".into()));
        }
        self.tracked = points.to_vec();
        self.remainder.gf = vec![0.0; points.len()];
        Ok(self)
    }

    /// Stop tracking points for which `keep` is false; their upper bound on
    /// `E(s^X)` becomes infinite once mass is removed.
    pub fn retain_tracked<F: Fn(f64) -> bool>(&mut self, keep: F) {
        let mut tracked = Vec::new();
        let mut gf = Vec::new();
        for (&s, &g) in self.tracked.iter().zip(&self.remainder.gf) {
            if keep(s) {
                tracked.push(s);
                gf.push(g);
            }
        }
        self.tracked = tracked;
        self.remainder.gf = gf;
    }

    pub fn step(&self) -> LatticeStep {
        self.step
    }

    /// Value represented by lattice index `k`.
    pub fn value_of(&self, k: usize) -> f64 {
        k as f64 * self.step.as_f64()
    }

    pub fn mass(&self, k: usize) -> f64 {
        if k < self.offset {
            return 0.0;
        }
        self.masses.get(k - self.offset).copied().unwrap_or(0.0)
    }

    /// Nonzero atoms as `(index, mass)` in increasing index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let off = self.offset;
        self.masses
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(move |(i, &m)| (off + i, m))
    }

    pub fn support_size(&self) -> usize {
        self.masses.iter().filter(|&&m| m > 0.0).count()
    }

    /// Width of the dense storage (`max_index - min_index + 1`).
    pub fn span(&self) -> usize {
        self.masses.len()
    }

    pub fn min_index(&self) -> Option<usize> {
        (!self.masses.is_empty()).then_some(self.offset)
    }

    pub fn max_index(&self) -> Option<usize> {
        (!self.masses.is_empty()).then(|| self.offset + self.masses.len() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn known_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Mass removed plus mass moved down (to 0 by truncation, or to the
    /// lowest index after underflow) so far.
    pub fn dropped(&self) -> f64 {
        self.remainder.mass + self.lowered
    }

    /// Mass removed outright; `known_mass() + removed_mass()` is 1 up to
    /// round-off, since moved mass stays in the known part.
    pub fn removed_mass(&self) -> f64 {
        self.remainder.mass
    }

    pub fn dropped_mean_bound(&self) -> f64 {
        self.remainder.mean
    }

    pub fn remainder(&self) -> &RemainderBound {
        &self.remainder
    }

    pub fn tracked_points(&self) -> &[f64] {
        &self.tracked
    }

    pub fn is_exact(&self) -> bool {
        self.remainder.mass == 0.0 && self.lowered == 0.0 && self.remainder.mean == 0.0
    }

    /// Mean of the known part: a certified lower bound on the true mean.
    pub fn mean(&self) -> f64 {
        let h = self.step.as_f64();
        self.iter().map(|(k, m)| k as f64 * h * m).sum()
    }

    /// Certified upper bound on the true mean.
    pub fn mean_upper(&self) -> f64 {
        self.mean() + self.remainder.mean
    }

    /// `P(X >= t)` restricted to the known part.
    pub fn tail(&self, t: f64) -> f64 {
        let h = self.step.as_f64();
        let k0 = (t / h - 1e-9).ceil().max(0.0) as usize;
        self.iter().filter(|&(k, _)| k >= k0).map(|x| x.1).sum()
    }

    /// `P(X > t)` restricted to the known part.
    pub fn tail_strict(&self, t: f64) -> f64 {
        let h = self.step.as_f64();
        self.iter()
            .filter(|&(k, _)| k as f64 * h > t + 1e-9)
            .map(|x| x.1)
            .sum()
    }

    pub fn zero_mass(&self) -> f64 {
        self.mass(0)
    }

    /// `E(s^X)` over the known part.
    pub fn gf_eval(&self, s: f64) -> f64 {
        let h = self.step.as_f64();
        self.iter().map(|(k, m)| weighted_pow(m, s, k as f64 * h)).sum()
    }

    /// `d/ds E(s^X)` over the known part.
    pub fn gf_deriv(&self, s: f64) -> f64 {
        let h = self.step.as_f64();
        self.iter()
            .filter(|&(k, _)| k > 0)
            .map(|(k, m)| {
                let x = k as f64 * h;
                x * weighted_pow(m, s, x - 1.0)
            })
            .sum()
    }

    /// Certified upper bound on `E(s^X)`; infinite when mass was removed and
    /// `s` is not tracked.
    pub fn gf_upper(&self, s: f64) -> f64 {
        let base = self.gf_eval(s);
        if self.is_exact() {
            return base;
        }
        match self.tracked.iter().position(|&t| t == s) {
            Some(i) => base + self.remainder.gf[i],
            None if s <= 1.0 => base + self.remainder.mass,
            None => f64::INFINITY,
        }
    }

    fn moments(&self) -> Moments {
        let h = self.step.as_f64();
        let mut mass = 0.0;
        let mut mean = 0.0;
        let mut gf = vec![0.0; self.tracked.len()];
        for (k, m) in self.iter() {
            let x = k as f64 * h;
            mass += m;
            mean += x * m;
            for (g, &s) in gf.iter_mut().zip(&self.tracked) {
                *g += weighted_pow(m, s, x);
            }
        }
        Moments { mass, mean, gf }
    }

    /// Removed part of a convolution written at `offset`: flushed and
    /// underflowed entries plus `abs_err` at every output position.
    fn flushed_bound(&self, offset: usize, out: &conv::ConvOutput) -> RemainderBound {
        let mut r = RemainderBound::zero(self.tracked.len());
        for &(i, m) in &out.flushed {
            r.add_atom(self.value_of(offset + i), m, &self.tracked);
        }
        for &(i, ln_m) in &out.lost {
            r.add_log_atom(self.value_of(offset + i), ln_m, &self.tracked);
        }
        r.add(&self.uniform_bound(offset, out.values.len(), out.abs_err));
        r
    }

    /// Mass `eps` at each of `len` positions starting at `offset`.
    fn uniform_bound(&self, offset: usize, len: usize, eps: f64) -> RemainderBound {
        let mut r = RemainderBound::zero(self.tracked.len());
        if eps > 0.0 && len > 0 {
            let h = self.step.as_f64();
            let x0 = self.value_of(offset);
            let n = len as f64;
            r.mass = eps * n;
            r.mean = eps * (n * x0 + h * n * (n - 1.0) / 2.0);
            for (g, &s) in r.gf.iter_mut().zip(&self.tracked) {
                let ln_s = s.ln();
                *g = (eps.ln() + x0 * ln_s + log_geometric_sum(h * ln_s, len)).exp();
            }
        }
        r
    }

    /// Law of the independent sum.
    pub fn convolve(&self, other: &LatticePmf) -> Result<LatticePmf> {
        if self.step != other.step {
            return Err(Error::StepMismatch { left: self.step.to_string(), right: other.step.to_string() });
        }
        // Track only points common to both operands.
        let tracked: Vec<f64> = self.tracked.iter().copied().filter(|s| other.tracked.contains(s)).collect();
        let pick = |pmf: &LatticePmf, m: &Moments| -> (Vec<f64>, Vec<f64>) {
            let idx: Vec<usize> = tracked
                .iter()
                .map(|s| pmf.tracked.iter().position(|t| t == s).unwrap())
                .collect();
            (
                idx.iter().map(|&i| m.gf[i]).collect(),
                idx.iter().map(|&i| pmf.remainder.gf[i]).collect(),
            )
        };
        let ma = self.moments();
        let mb = other.moments();
        let (ga, gra) = pick(self, &ma);
        let (gb, grb) = pick(other, &mb);
        let (ra, rb) = (&self.remainder, &other.remainder);

        let out = conv::convolve(&self.masses, &other.masses);
        let offset = self.offset + other.offset;

        let mut rem = RemainderBound {
            mass: ma.mass * rb.mass + ra.mass * mb.mass + ra.mass * rb.mass,
            mean: (ma.mean * rb.mass + ma.mass * rb.mean)
                + (ra.mean * mb.mass + ra.mass * mb.mean)
                + (ra.mean * rb.mass + ra.mass * rb.mean),
            gf: (0..tracked.len())
                .map(|i| ga[i] * grb[i] + gra[i] * gb[i] + gra[i] * grb[i])
                .collect(),
        };
        let mut scratch = self.clone();
        scratch.tracked = tracked.clone();
        rem.add(&scratch.flushed_bound(offset, &out));
        Ok(Self::from_dense(self.step, offset, out.values, rem, self.lowered + other.lowered, tracked))
    }

    /// One step of the max-type recursion: the law of
    /// `(X_1 + ... + X_nu - 1)^+` with `X_i` i.i.d. copies of `self`.
    pub fn dr_step(&self, nu: &OffspringLaw) -> Result<LatticePmf> {
        let shift = self
            .step
            .steps_per_unit()
            .ok_or_else(|| Error::StepDoesNotDivideOne(self.step.to_string()))?;
        let tracked = self.tracked.clone();
        let nt = tracked.len();
        let a = self.moments();
        let r = &self.remainder;

        // Known part of the nu-mixture, accumulated with its own offset.
        let mut mix_offset = usize::MAX;
        let mut mix: Vec<f64> = Vec::new();
        let mut rem = RemainderBound::zero(nt);
        // part of rem.mass inherited from removed input mass; the rest is
        // round-off and underflow inside the output range
        let mut removed_mass = 0.0;

        // power = computed A^{*k}; err = moments of A^{*k} - power (flushed mass).
        let mut power = self.masses.clone();
        let mut power_offset = self.offset;
        let mut err = RemainderBound::zero(nt);
        let mut k_done = 1u32;

        for &(k, pk) in nu.probs() {
            while k_done < k {
                let out = conv::convolve(&power, &self.masses);
                let new_offset = power_offset + self.offset;
                // err_{k+1} = err_k * A + flushed
                let mut next = RemainderBound {
                    mass: err.mass * a.mass,
                    mean: err.mean * a.mass + err.mass * a.mean,
                    gf: (0..nt).map(|i| err.gf[i] * a.gf[i]).collect(),
                };
                next.add(&self.flushed_bound(new_offset, &out));
                err = next;
                power = out.values;
                power_offset = new_offset;
                k_done += 1;
            }
            if conv::min_positive(&power) * pk < f64::MIN_POSITIVE {
                // scaling by pk underflows; each such entry loses at most x * pk
                for (i, &x) in power.iter().enumerate() {
                    if x > 0.0 && x * pk < f64::MIN_POSITIVE {
                        rem.add_log_atom(self.value_of(power_offset + i), x.ln() + pk.ln(), &tracked);
                    }
                }
            }
            if power.is_empty() {
                // nothing known survives; the whole contribution is remainder
            } else if mix.is_empty() {
                mix_offset = power_offset;
                mix = power.iter().map(|&x| x * pk).collect();
            } else {
                let lo = mix_offset.min(power_offset);
                let hi = (mix_offset + mix.len()).max(power_offset + power.len());
                let mut merged = vec![0.0; hi - lo];
                for (i, &x) in mix.iter().enumerate() {
                    merged[mix_offset - lo + i] += x;
                }
                for (i, &x) in power.iter().enumerate() {
                    merged[power_offset - lo + i] += x * pk;
                }
                mix = merged;
                mix_offset = lo;
            }

            // Remainder of the k-fold sum: (A+R)^{*k} - A^{*k} + err_k.
            let k1 = k - 1;
            let total = a.mass + r.mass;
            let term = RemainderBound {
                mass: pow_diff(a.mass, r.mass, k) + err.mass,
                mean: k as f64
                    * (r.mean * total.powi(k1 as i32) + a.mean * pow_diff(a.mass, r.mass, k1))
                    + err.mean,
                gf: (0..nt)
                    .map(|i| pow_diff(a.gf[i], r.gf[i], k) + err.gf[i])
                    .collect(),
            };
            rem.add(&term.scaled(pk));
            removed_mass += pk * pow_diff(a.mass, r.mass, k);
        }

        // Apply x -> (x - 1)^+ to the known part.
        let mut out = Vec::new();
        let mut out_offset = 0usize;
        if !mix.is_empty() {
            let last = mix_offset + mix.len() - 1;
            if last <= shift {
                out = vec![mix.iter().sum()];
            } else {
                out_offset = mix_offset.saturating_sub(shift);
                let len = last - shift - out_offset + 1;
                out = vec![0.0; len];
                for (i, &x) in mix.iter().enumerate() {
                    let idx = (mix_offset + i).saturating_sub(shift);
                    out[idx - out_offset] += x;
                }
            }
        }
        // and to the remainder: mass and mean bounds unchanged,
        // s^{(x-1)^+} <= s^x / s + max(0, 1 - 1/s).
        for (g, &s) in rem.gf.iter_mut().zip(&tracked) {
            *g = *g / s + (1.0 - 1.0 / s).max(0.0) * rem.mass;
        }
        // Total mass maps as T -> sum_k P(nu=k) T^k, which repels from 1, so
        // both round-off and a removed-mass bound for lost low-order bits
        // would double every step. That lost mass lives inside the output
        // range, so it is moved to the lowest stored index instead (a
        // lowering; the mean and gf bounds above already cover it) and the
        // known part is pinned to 1 - removed.
        let lost = (rem.mass - removed_mass).max(0.0);
        let mut lowered = self.lowered;
        let known: f64 = out.iter().sum();
        let target = 1.0 - removed_mass.min(rem.mass);
        let slack = 1e-12 * target;
        if known > 0.0 && target > 0.0 {
            if known < target && target - known <= lost + slack {
                out[0] += target - known;
                lowered += target - known;
                rem.mass = removed_mass.min(rem.mass);
            } else if (known - target).abs() <= slack {
                let scale = target / known;
                out.iter_mut().for_each(|x| *x *= scale);
                rem.mass = removed_mass.min(rem.mass);
            }
        }
        Ok(Self::from_dense(self.step, out_offset, out, rem, lowered, tracked))
    }

    /// Remove upper-tail atoms of total mass at most `mass_budget`. The atom at
    /// index 0 is never removed.
    pub fn truncate(&self, mass_budget: f64) -> LatticePmf {
        self.truncate_with(TruncationBudget::mass_only(mass_budget))
    }

    /// Remove upper-tail atoms while every budget still holds.
    pub fn truncate_with(&self, budget: TruncationBudget) -> LatticePmf {
        self.cut_tail(budget, false)
    }

    /// Move upper-tail atoms down to index 0 while every budget holds.
    ///
    /// The result is a probability law stochastically below the input; the
    /// first-moment and generating-function budgets bound the excess
    /// `x` and `s^x - 1` of each moved atom. Unlike removal, moved mass is
    /// not amplified by later steps.
    pub fn lower_tail_with(&self, budget: TruncationBudget) -> LatticePmf {
        self.cut_tail(budget, true)
    }

    fn cut_tail(&self, budget: TruncationBudget, lower: bool) -> LatticePmf {
        let mut removed = RemainderBound::zero(self.tracked.len());
        let mut cut = self.masses.len();
        while cut > 0 {
            let i = cut - 1;
            let k = self.offset + i;
            if k == 0 {
                break;
            }
            let m = self.masses[i];
            if m > 0.0 {
                let x = self.value_of(k);
                let next_mass = removed.mass + m;
                let next_mean = removed.mean + x * m;
                let gf_ok = self
                    .tracked
                    .iter()
                    .zip(&removed.gf)
                    .all(|(&s, &g)| g + gf_excess(s, x, m, lower) <= budget.gf);
                if next_mass > budget.mass || next_mean > budget.mean || !gf_ok {
                    break;
                }
                removed.mass = next_mass;
                removed.mean = next_mean;
                for (g, &s) in removed.gf.iter_mut().zip(&self.tracked) {
                    *g += gf_excess(s, x, m, lower);
                }
            }
            cut = i;
        }
        if cut == self.masses.len() {
            return self.clone();
        }
        let mut rem = self.remainder.clone();
        let mut lowered = self.lowered;
        let mut masses = self.masses[..cut].to_vec();
        let mut offset = self.offset;
        if lower {
            lowered += removed.mass;
            rem.mean += removed.mean;
            for (g, r) in rem.gf.iter_mut().zip(&removed.gf) {
                *g += r;
            }
            if offset > 0 {
                let mut dense = vec![0.0; offset];
                dense.extend_from_slice(&masses);
                masses = dense;
                offset = 0;
            }
            if masses.is_empty() {
                masses.push(0.0);
            }
            masses[0] += removed.mass;
        } else {
            rem.add(&removed);
        }
        Self::from_dense(self.step, offset, masses, rem, lowered, self.tracked.clone())
    }

    /// Pointwise tail comparison: `P_self(X >= t) >= P_other(X >= t) - tol` for all `t`.
    pub fn dominates(&self, other: &LatticePmf, tol: f64) -> Result<bool> {
        if self.step != other.step {
            return Err(Error::StepMismatch { left: self.step.to_string(), right: other.step.to_string() });
        }
        let hi = self.max_index().unwrap_or(0).max(other.max_index().unwrap_or(0));
        let (mut ta, mut tb) = (0.0, 0.0);
        for k in (0..=hi).rev() {
            ta += self.mass(k);
            tb += other.mass(k);
            if ta < tb - tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Total variation distance between the known parts.
    pub fn total_variation(&self, other: &LatticePmf) -> f64 {
        let hi = self.max_index().unwrap_or(0).max(other.max_index().unwrap_or(0));
        0.5 * (0..=hi).map(|k| (self.mass(k) - other.mass(k)).abs()).sum::<f64>()
            + 0.5 * (self.dropped() + other.dropped())
    }

    /// Known masses as a dense vector starting at index 0.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.offset + self.masses.len()];
        v[self.offset..].copy_from_slice(&self.masses);
        v
    }
}

impl Serialize for LatticePmf {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Masses<'a>(&'a LatticePmf);
        impl Serialize for Masses<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(self.0.support_size()))?;
                for (k, m) in self.0.iter() {
                    map.serialize_entry(&k.to_string(), &m)?;
                }
                map.end()
            }
        }
        let mut st = serializer.serialize_struct("LatticePmf", 4)?;
        st.serialize_field("step", &self.step.to_string())?;
        st.serialize_field("masses", &Masses(self))?;
        st.serialize_field("dropped", &self.dropped())?;
        st.serialize_field("dropped_mean_bound", &self.remainder.mean)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for LatticePmf {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(default = "unit_step")]
            step: String,
            #[serde(deserialize_with = "masses_map")]
            masses: Vec<(usize, f64)>,
            #[serde(default)]
            dropped: f64,
            #[serde(default)]
            dropped_mean_bound: f64,
        }
        fn unit_step() -> String {
            "1/1".into()
        }
        let raw = Raw::deserialize(deserializer)?;
        let step: LatticeStep = raw.step.parse().map_err(de::Error::custom)?;
        LatticePmf::from_parts(step, raw.masses, raw.dropped, raw.dropped_mean_bound).map_err(de::Error::custom)
    }
}

/// Parse a JSON object `{"k": mass, ...}` with nonnegative integer keys.
pub(crate) fn masses_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<(usize, f64)>, D::Error> {
    struct V;
    impl<'de> Visitor<'de> for V {
        type Value = Vec<(usize, f64)>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map from lattice index to mass")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some((k, v)) = access.next_entry::<String, f64>()? {
                let idx: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| de::Error::custom(format!("bad lattice index {k:?}")))?;
                out.push((idx, v));
            }
            Ok(out)
        }
    }
    d.deserialize_map(V)
}
