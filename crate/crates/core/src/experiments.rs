//! Tail families for `Y_0`, exponent fits along geometric `p` grids, the
//! near-critical exploratory scan and the max-leaf lower-bound check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criticality::pc_theorem_a;
use crate::engine::{free_energy_with, FreeEnergy, FreeEnergyConfig, DEFAULT_SUPPORT_CAP};
use crate::error::{Error, Result};
use crate::gf_bounds::{beta, chi, upper_bound_critical, UpperBound, UpperBoundConfig};
use crate::model::{make_initial, ModelSpec, TailMeta};
use crate::offspring::OffspringLaw;
use crate::pmf::{LatticePmf, LatticeStep};
use crate::tree_sim::{max_leaf_probabilities, MonteCarlo};

/// Parametric tail shape of `P(Y_0 = k)` on `1..=k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailKind {
    /// `P(Y_0 = k)` proportional to `e^(-theta k)`.
    Exponential { theta: f64 },
    /// `P(Y_0 = k)` proportional to `k^alpha m^(-k)`.
    Critical { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFamily {
    pub kind: TailKind,
    pub m: f64,
    pub k_max: usize,
    #[serde(skip)]
    pub pmf: LatticePmf,
    /// Mass of the untruncated law beyond `k_max`.
    pub remainder_mass: f64,
    /// `min` and `max` over `1 <= x <= k_max` of `P(Y_0 >= x) / r(x)` where
    /// `r(x)` is `e^(-theta x)` or `x^alpha m^(-x)`.
    pub c_low: f64,
    pub c_high: f64,
}

impl TailKind {
    fn log_weight(&self, k: f64, m: f64) -> f64 {
        match *self {
            TailKind::Exponential { theta } => -theta * k,
            TailKind::Critical { alpha } => alpha * k.ln() - k * m.ln(),
        }
    }

    pub fn meta(&self) -> TailMeta {
        match *self {
            TailKind::Exponential { theta } => TailMeta::Exponential { theta },
            TailKind::Critical { alpha } => TailMeta::Critical { alpha },
        }
    }

    fn validate(&self, m: f64) -> Result<()> {
        if !(m > 1.0 && m.is_finite()) {
            return Err(Error::InvalidArgument(format!("base m = {m} must exceed 1")));
        }
        match *self {
            TailKind::Exponential { theta } if !(theta > 0.0 && theta.is_finite()) => {
                Err(Error::InvalidArgument(format!("theta = {theta} must be positive")))
            }
            TailKind::Critical { alpha } if !(alpha > -2.0 && alpha.is_finite()) => {
                Err(Error::InvalidArgument(format!("alpha = {alpha} must exceed -2")))
            }
            _ => Ok(()),
        }
    }

    /// Sum of the unnormalized weights over `k > k_max`, with a geometric
    /// bound for the far tail.
    fn tail_weight(&self, m: f64, k_max: usize) -> f64 {
        let w = |k: usize| self.log_weight(k as f64, m).exp();
        let extra = 4000;
        let mut acc = 0.0;
        for k in k_max + 1..=k_max + extra {
            acc += w(k);
        }
        let k = (k_max + extra) as f64;
        let ratio = match *self {
            TailKind::Exponential { theta } => (-theta).exp(),
            TailKind::Critical { alpha } => ((k + 1.0) / k).powf(alpha.max(0.0)) / m,
        };
        acc + w(k_max + extra + 1) / (1.0 - ratio)
    }
}

/// Normalized `Y_0` law on `1..=k_max`.
pub fn make_tail_family(kind: TailKind, m: f64, k_max: usize) -> Result<TailFamily> {
    kind.validate(m)?;
    if k_max < 1 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let logw: Vec<f64> = (1..=k_max).map(|k| kind.log_weight(k as f64, m)).collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
    let pmf = LatticePmf::from_masses(LatticeStep::UNIT, probs.iter().enumerate().map(|(i, &q)| (i + 1, q)))?;
    let z_abs = z * top.exp();
    let tail = kind.tail_weight(m, k_max);
    let remainder_mass = tail / (z_abs + tail);
    let mut c_low = f64::INFINITY;
    let mut c_high = 0.0f64;
    let mut survival = 1.0f64;
    for (i, &q) in probs.iter().enumerate() {
        let x = (i + 1) as f64;
        let r = match kind {
            TailKind::Exponential { theta } => (-theta * x).exp(),
            TailKind::Critical { alpha } => (alpha * x.ln() - x * m.ln()).exp(),
        };
        let ratio = survival.max(0.0) / r;
        c_low = c_low.min(ratio);
        c_high = c_high.max(ratio);
        survival -= q;
    }
    Ok(TailFamily { kind, m, k_max, pmf, remainder_mass, c_low, c_high })
}

/// Smallest `k_max >= 4` whose remainder mass is below `target`.
pub fn k_max_for(kind: TailKind, m: f64, target: f64) -> Result<usize> {
    kind.validate(m)?;
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!("target {target} must be positive")));
    }
    let mut k = 4;
    while k < 100_000 {
        let tail = kind.tail_weight(m, k);
        let z: f64 = (1..=k).map(|j| kind.log_weight(j as f64, m).exp()).sum();
        if tail / (z + tail) < target {
            return Ok(k);
        }
        k += 1;
    }
    Err(Error::InvalidArgument(format!("no k_max below 100000 reaches remainder {target}")))
}

impl TailFamily {
    pub fn spec(&self, nu: &OffspringLaw, p: f64) -> Result<ModelSpec> {
        Ok(ModelSpec::new(nu.clone(), self.pmf.clone(), p)?.with_tail(self.kind.meta()))
    }
}

/// Geometric grid `hi, hi r, hi r^2, ...` down to `lo`, returned increasing.
pub fn geometric_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || points == 0 {
        return Err(Error::InvalidArgument(format!("bad grid [{lo}, {hi}] with {points} points")));
    }
    if points == 1 {
        return Ok(vec![hi]);
    }
    let r = (lo / hi).powf(1.0 / (points - 1) as f64);
    let mut g: Vec<f64> = (0..points).map(|i| hi * r.powi(i as i32)).collect();
    g[points - 1] = lo;
    g.reverse();
    Ok(g)
}

/// `2^-hi, ..., 2^-lo` for integer exponents, increasing.
pub fn dyadic_grid(lo_exp: i32, hi_exp: i32) -> Vec<f64> {
    (lo_exp..=hi_exp).rev().map(|e| 0.5f64.powi(e)).collect()
}

/// Least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

pub fn least_squares(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least two paired points, got {}", x.len().min(y.len()))));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - slope * a - intercept).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LineFit { slope, intercept, residuals, r_squared })
}

/// Free-energy evaluation settings for sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Relative width required of a certified interval before it is used.
    pub rel_tol: f64,
    pub n_cap: usize,
    pub mass_budget: f64,
    pub support_cap: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { rel_tol: 0.05, n_cap: 400, mass_budget: 1e-12, support_cap: DEFAULT_SUPPORT_CAP }
    }
}

impl SweepConfig {
    fn free_energy_config(&self) -> FreeEnergyConfig {
        FreeEnergyConfig {
            abs_tol: 0.0,
            rel_tol: self.rel_tol,
            n_cap: self.n_cap,
            mass_budget: self.mass_budget,
            support_cap: self.support_cap,
        }
    }
}

/// Certified free energy at each grid point, in grid order.
pub fn sweep_free_energy<F>(grid: &[f64], spec_at: F, cfg: &SweepConfig) -> Result<Vec<FreeEnergy>>
where
    F: Fn(f64) -> Result<ModelSpec> + Sync,
{
    let fec = cfg.free_energy_config();
    let out: Result<Vec<FreeEnergy>> = grid.par_iter().map(|&p| free_energy_with(&spec_at(p)?, &fec)).collect();
    let out = out?;
    check_monotone(grid, &out)?;
    Ok(out)
}

/// Along an increasing grid, a certified lower bound at `p` may not exceed
/// a certified upper bound at any larger `p`.
fn check_monotone(grid: &[f64], fe: &[FreeEnergy]) -> Result<()> {
    let mut best_low = f64::NEG_INFINITY;
    let mut at = 0.0;
    for (p, f) in grid.iter().zip(fe) {
        if f.high < best_low * (1.0 - 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "free energy not monotone: lower bound {best_low} at p = {at} exceeds upper bound {} at p = {p}",
                f.high
            )));
        }
        if f.low > best_low {
            best_low = f.low;
            at = *p;
        }
    }
    Ok(())
}

/// One grid point of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitPoint {
    pub p: f64,
    pub f_low: f64,
    pub f_high: f64,
    /// Geometric midpoint of the certified interval.
    pub f_hat: f64,
    pub n_used: usize,
    pub admissible: bool,
    /// Free-energy upper bound from the generating-function pipeline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gf_upper: Option<UpperBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub exponent: String,
    pub target: f64,
    pub tolerance: f64,
    pub points: Vec<FitPoint>,
    pub fit: LineFit,
    pub pass: bool,
    /// Extra one-sided check, when the fit has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Refinement>,
}

/// `min over the grid of p^chi log(1/F_upper)`, which should stay bounded
/// away from zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Refinement {
    pub values: Vec<f64>,
    pub min: f64,
    pub positive: bool,
}

fn fit_points(grid: &[f64], fe: &[FreeEnergy], rel_tol: f64) -> Vec<FitPoint> {
    grid.iter()
        .zip(fe)
        .map(|(&p, f)| {
            let admissible = f.low > 0.0 && f.high - f.low <= rel_tol * f.low;
            FitPoint {
                p,
                f_low: f.low,
                f_high: f.high,
                f_hat: (f.low * f.high).sqrt(),
                n_used: f.n_used,
                admissible,
                gf_upper: None,
            }
        })
        .collect()
}

/// Options shared by the two exponent fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub sweep: SweepConfig,
    /// Allowed `|slope - target|`.
    pub tolerance: f64,
    /// Remainder mass of the tail family relative to the smallest grid `p`.
    pub remainder_factor: f64,
    /// Tunable constant of the critical-family schedule.
    pub c7: f64,
    /// Minimum number of admissible points.
    pub min_points: usize,
    /// Critical families also use `k_max >= support_factor / sqrt(p_min)`;
    /// a cutoff at `K` alone gives the truncated law a critical point near
    /// `2/K^2`.
    pub support_factor: f64,
    /// Fixed cutoff overriding the two rules above.
    pub k_max: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { sweep: SweepConfig::default(), tolerance: 0.3, remainder_factor: 1e-3, c7: 1.0, min_points: 4, support_factor: 8.0, k_max: None }
    }
}

/// Slope of `log F` against `log p` for `P(Y_0 = k)` proportional to
/// `e^(-theta k)`, compared with `log m / (log m - theta)`.
pub fn fit_beta(theta: f64, nu: &OffspringLaw, p_grid: &[f64], cfg: &FitConfig) -> Result<FitReport> {
    let m = nu.mean();
    if !(theta > 0.0 && theta < m.ln()) {
        return Err(Error::InvalidArgument(format!("theta = {theta} must lie in (0, log m)")));
    }
    let kind = TailKind::Exponential { theta };
    let family = family_for_grid(kind, m, p_grid, cfg)?;
    let fe = sweep_free_energy(p_grid, |p| family.spec(nu, p), &cfg.sweep)?;
    let points = fit_points(p_grid, &fe, cfg.sweep.rel_tol);
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        points.iter().filter(|q| q.admissible).map(|q| (q.p.ln(), q.f_hat.ln())).unzip();
    require_points(xs.len(), cfg.min_points, &points)?;
    let fit = least_squares(&xs, &ys)?;
    let target = beta(theta, m);
    Ok(FitReport {
        exponent: "beta".into(),
        target,
        tolerance: cfg.tolerance,
        pass: (fit.slope - target).abs() <= cfg.tolerance,
        points,
        fit,
        refinement: None,
    })
}

/// Slope of `log log(1/F)` against `log(1/p)` for `P(Y_0 = k)` proportional
/// to `k^alpha m^(-k)`, compared with `1/(alpha+2)`; also evaluates
/// `p^chi log(1/F_upper)` with the generating-function upper bound.
pub fn fit_chi(alpha: f64, nu: &OffspringLaw, p_grid: &[f64], cfg: &FitConfig) -> Result<FitReport> {
    let m = nu.mean();
    if !(alpha > -2.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must exceed -2")));
    }
    let kind = TailKind::Critical { alpha };
    let family = family_for_grid(kind, m, p_grid, cfg)?;
    let fe = sweep_free_energy(p_grid, |p| family.spec(nu, p), &cfg.sweep)?;
    let mut points = fit_points(p_grid, &fe, cfg.sweep.rel_tol);
    let ub_cfg = UpperBoundConfig::default();
    let bounds: Vec<Option<UpperBound>> = p_grid
        .par_iter()
        .map(|&p| family.spec(nu, p).and_then(|s| upper_bound_critical(&s, cfg.c7, &ub_cfg)).ok())
        .collect();
    for (pt, b) in points.iter_mut().zip(bounds) {
        pt.gf_upper = b;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|q| q.admissible && q.f_hat < 1.0)
        .map(|q| ((1.0 / q.p).ln(), (1.0 / q.f_hat).ln().ln()))
        .unzip();
    require_points(xs.len(), cfg.min_points, &points)?;
    let fit = least_squares(&xs, &ys)?;
    let target = chi(alpha);
    let values: Vec<f64> = points
        .iter()
        .map(|q| {
            // the tighter of the two certified upper bounds
            let gf = q.gf_upper.as_ref().filter(|b| b.established).map_or(f64::INFINITY, |b| b.f_upper);
            let up = gf.min(q.f_high);
            q.p.powf(target) * (1.0 / up).ln()
        })
        .collect();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(FitReport {
        exponent: "chi".into(),
        target,
        tolerance: cfg.tolerance,
        pass: (fit.slope - target).abs() <= cfg.tolerance && min > 0.0,
        points,
        fit,
        refinement: Some(Refinement { values, min, positive: min > 0.0 }),
    })
}

fn family_for_grid(kind: TailKind, m: f64, p_grid: &[f64], cfg: &FitConfig) -> Result<TailFamily> {
    let p_min = p_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    if p_grid.is_empty() || !(p_min > 0.0) || p_grid.iter().any(|&p| p > 1.0) {
        return Err(Error::InvalidArgument("p grid must be nonempty within (0, 1]".into()));
    }
    if p_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("p grid must be strictly increasing".into()));
    }
    let k_max = match cfg.k_max {
        Some(k) => k,
        None => default_k_max(kind, m, p_min, cfg)?,
    };
    make_tail_family(kind, m, k_max)
}

/// Smallest `k_max` with remainder below `remainder_factor * p_min`, raised
/// to `support_factor / sqrt(p_min)` for critical families.
pub fn default_k_max(kind: TailKind, m: f64, p_min: f64, cfg: &FitConfig) -> Result<usize> {
    let k = k_max_for(kind, m, cfg.remainder_factor * p_min)?;
    Ok(match kind {
        TailKind::Critical { .. } => k.max((cfg.support_factor / p_min.sqrt()).ceil() as usize),
        TailKind::Exponential { .. } => k,
    })
}

fn require_points(have: usize, need: usize, points: &[FitPoint]) -> Result<()> {
    if have < need.max(2) {
        let diag: Vec<String> = points
            .iter()
            .map(|q| format!("p={:.4e} [{:.3e}, {:.3e}] n={}", q.p, q.f_low, q.f_high, q.n_used))
            .collect();
        return Err(Error::InsufficientData(format!(
            "{have} admissible points, need {need}: {}",
            diag.join("; ")
        )));
    }
    Ok(())
}

/// Exploratory fit of `log(1/F)` against `(p - p_c)^(-1/2)` above `p_c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjectureReport {
    pub exploratory: bool,
    pub p_c: f64,
    pub points: Vec<FitPoint>,
    /// Slope `K` and intercept; absent when fewer than two points qualify.
    pub fit: Option<LineFit>,
    /// `log(1/F)` decreases along the grid.
    pub monotone: bool,
    /// Set when some grid points had no certified interval.
    pub partial: bool,
}

/// Largest window offset `p - p_c` accepted by [`conjecture_scan`].
pub const CONJECTURE_MAX_OFFSET: f64 = 0.5;

pub fn conjecture_scan(y0: &LatticePmf, nu: &OffspringLaw, p_grid: &[f64], cfg: &SweepConfig) -> Result<ConjectureReport> {
    let p_c = pc_theorem_a(y0, nu)?;
    conjecture_scan_with_pc(y0, nu, p_c, p_grid, cfg)
}

pub fn conjecture_scan_with_pc(
    y0: &LatticePmf,
    nu: &OffspringLaw,
    p_c: f64,
    p_grid: &[f64],
    cfg: &SweepConfig,
) -> Result<ConjectureReport> {
    if p_grid.is_empty() || p_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("p grid must be nonempty and strictly increasing".into()));
    }
    for &p in p_grid {
        if !(p > p_c && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("p = {p} is not in (p_c, 1] with p_c = {p_c}")));
        }
        if p - p_c > CONJECTURE_MAX_OFFSET {
            return Err(Error::InvalidArgument(format!(
                "p = {p} lies more than {CONJECTURE_MAX_OFFSET} above p_c = {p_c}"
            )));
        }
    }
    let base = ModelSpec::new(nu.clone(), y0.clone(), p_grid[0])?;
    let fe = sweep_free_energy(p_grid, |p| base.with_p(p), cfg)?;
    let points = fit_points(p_grid, &fe, cfg.rel_tol);
    let good: Vec<&FitPoint> = points.iter().filter(|q| q.admissible).collect();
    let partial = good.len() < points.len();
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        good.iter().map(|q| ((q.p - p_c).powf(-0.5), (1.0 / q.f_hat).ln())).unzip();
    let fit = least_squares(&xs, &ys).ok();
    let monotone = ys.windows(2).all(|w| w[1] <= w[0]);
    Ok(ConjectureReport { exploratory: true, p_c, points, fit, monotone, partial })
}

/// `P(X_n > b)` against a Monte Carlo estimate of `P(max leaf - n > b)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxLeafRow {
    pub b: f64,
    pub exact: f64,
    pub estimate: f64,
    pub std_err: f64,
    /// `exact >= estimate - 3 std_err`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxLeafReport {
    pub n: usize,
    pub trials: usize,
    pub rows: Vec<MaxLeafRow>,
    pub holds: bool,
}

pub fn max_leaf_lower_bound_check(spec: &ModelSpec, n: usize, b_grid: &[f64], mc: &MonteCarlo) -> Result<MaxLeafReport> {
    let law = crate::engine::iterate(spec, n, 0.0)?.last;
    // only underflow in the far tail may be lost; the known tail stays a lower bound
    if law.dropped() > 1e-12 {
        return Err(Error::CapExceeded(format!("exact law of X_{n} not reachable")));
    }
    let est = max_leaf_probabilities(spec, n, b_grid, mc)?;
    let rows: Vec<MaxLeafRow> = b_grid
        .iter()
        .zip(est)
        .map(|(&b, (estimate, std_err))| {
            let exact = law.tail_strict(b);
            MaxLeafRow { b, exact, estimate, std_err, holds: exact >= estimate - 3.0 * std_err - 1e-12 }
        })
        .collect();
    let holds = rows.iter().all(|r| r.holds);
    Ok(MaxLeafReport { n, trials: mc.trials, rows, holds })
}

/// `E(Y_0 m^Y_0)` style sanity value used by reports: mean of the initial law.
pub fn initial_mean(spec: &ModelSpec) -> f64 {
    make_initial(spec).mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_family_normalizes() {
        let f = make_tail_family(TailKind::Exponential { theta: 2f64.ln() }, 2.0, 2).unwrap();
        assert!((f.pmf.mass(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.pmf.mass(2) - 1.0 / 3.0).abs() < 1e-15);
        // untruncated law is geometric(1/2) on {1,2,...}: mass beyond 2 is 1/4
        assert!((f.remainder_mass - 0.25).abs() < 1e-12);
    }

    #[test]
    fn critical_family() {
        let f = make_tail_family(TailKind::Critical { alpha: 0.0 }, 2.0, 10).unwrap();
        for k in 1..10 {
            assert!((f.pmf.mass(k) / f.pmf.mass(k + 1) - 2.0).abs() < 1e-12);
        }
        let f = make_tail_family(TailKind::Critical { alpha: 1.0 }, 2.0, 30).unwrap();
        // sum_{k>30} k 2^-k = 32 * 2^-30, total sum 2
        let want = 32.0 * 0.5f64.powi(30) / 2.0;
        assert!((f.remainder_mass - want).abs() < 1e-3 * want);
        assert!(f.remainder_mass < 1e-6);
        assert!(f.c_low > 0.0 && f.c_low <= f.c_high);
        assert!(make_tail_family(TailKind::Critical { alpha: -2.0 }, 2.0, 10).is_err());
    }

    #[test]
    fn k_max_meets_target() {
        let kind = TailKind::Exponential { theta: 0.5 * 2f64.ln() };
        let k = k_max_for(kind, 2.0, 1e-6).unwrap();
        assert!(make_tail_family(kind, 2.0, k).unwrap().remainder_mass < 1e-6);
        assert!(make_tail_family(kind, 2.0, k - 1).unwrap().remainder_mass >= 1e-6);
    }

    #[test]
    fn least_squares_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = least_squares(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
        assert!(least_squares(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn grids() {
        let g = dyadic_grid(4, 6);
        assert_eq!(g, vec![1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0]);
        let g = geometric_grid(0.01, 1.0, 3).unwrap();
        assert!((g[1] - 0.1).abs() < 1e-12 && g[0] == 0.01 && g[2] == 1.0);
    }

    #[test]
    fn conjecture_window_validation() {
        let nu = OffspringLaw::deterministic(2).unwrap();
        let y0 = LatticePmf::point(LatticeStep::UNIT, 2);
        let cfg = SweepConfig::default();
        assert!(conjecture_scan(&y0, &nu, &[0.25, 0.9], &cfg).is_err());
        assert!(conjecture_scan(&y0, &nu, &[0.1, 0.3], &cfg).is_err());
    }

    fn two_ary(y0: usize, p: f64) -> ModelSpec {
        ModelSpec::new(OffspringLaw::deterministic(2).unwrap(), LatticePmf::point(LatticeStep::UNIT, y0), p).unwrap()
    }

    #[test]
    fn max_leaf_trivial_cases() {
        let mc = MonteCarlo::new(2000, 3);
        let r = max_leaf_lower_bound_check(&two_ary(2, 0.0), 4, &[0.0, 1.0], &mc).unwrap();
        assert!(r.holds && r.rows.iter().all(|x| x.exact == 0.0 && x.estimate == 0.0));
        // X_2 = 5 while every leaf is 2, so max leaf - 2 = 0
        let r = max_leaf_lower_bound_check(&two_ary(2, 1.0), 2, &[2.0], &mc).unwrap();
        assert_eq!((r.rows[0].exact, r.rows[0].estimate), (1.0, 0.0));
    }

    #[test]
    fn max_leaf_bernoulli_battery() {
        let r = max_leaf_lower_bound_check(&two_ary(1, 0.3), 6, &[0.0, 1.0, 2.0], &MonteCarlo::new(20_000, 5)).unwrap();
        assert!(r.holds);
        assert_eq!(r.rows.len(), 3);
    }
}
