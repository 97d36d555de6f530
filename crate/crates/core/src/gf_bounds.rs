//! Generating-function pipeline: `G_n(s) = E(s^X_n)`, its derivative, the
//! contraction inequality `G'_n(s) <= (m/s)^n G'_0(s)` and free-energy upper
//! bounds `F_inf <= E(X_N)/m^N <= log(1 + a_N) / (m^N log s)`.

use serde::Serialize;

use crate::engine::{Recursion, StopReason, TruncationPolicy, WidthBudget, DEFAULT_SUPPORT_CAP};
use crate::error::{Error, Result};
use crate::model::{make_initial, ModelSpec, TailMeta};
use crate::offspring::OffspringLaw;

/// Relative agreement required between the two ways of computing `G_n(s)`.
pub const CROSS_CHECK_TOL: f64 = 1e-9;

/// Relative slack on float evaluations of `E(s^X)` used as upper bounds.
const GF_SLACK: f64 = 1e-12;

/// Points with `a_n` above this are left out of the scalar cross-check:
/// there `E(s^X)` is dominated by atoms far out in the tail, whose masses
/// sit at the convolution noise floor or underflow.
pub const CROSS_CHECK_A_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GfTracePoint {
    pub n: usize,
    pub s: f64,
    /// `G_n(s)` from the pmf iterate.
    pub g: f64,
    /// `G'_n(s)` from the pmf iterate.
    pub g_deriv: f64,
    /// `G_n(s) - 1`.
    pub a: f64,
    /// `G_n(0) = P(X_n = 0)`.
    pub zero: f64,
    /// `G_n(s)` and `G'_n(s)` from the scalar recursion, integer lattice only.
    pub g_scalar: Option<f64>,
    pub g_deriv_scalar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GfTrace {
    pub s: f64,
    pub m: f64,
    pub points: Vec<GfTracePoint>,
    /// Every iterate was exact (no truncation).
    pub exact: bool,
    /// The scalar recursion was available and agreed within [`CROSS_CHECK_TOL`].
    pub cross_checked: bool,
    pub max_rel_discrepancy: f64,
    pub stop: StopReason,
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Exact iterates up to `n_max` (or until the support cap).
pub fn gf_trace(spec: &ModelSpec, s: f64, n_max: usize) -> Result<GfTrace> {
    gf_trace_with(spec, s, n_max, TruncationPolicy::exact())
}

pub fn gf_trace_with(spec: &ModelSpec, s: f64, n_max: usize, policy: TruncationPolicy) -> Result<GfTrace> {
    if !(s > 1.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("s = {s} must exceed 1")));
    }
    let nu = spec.nu();
    let integer = spec.y0().step().is_unit();
    let mut rec = Recursion::new(spec, policy);
    let mut points: Vec<GfTracePoint> = Vec::new();
    let mut stop = StopReason::Completed;
    loop {
        let pmf = rec.current();
        let g = pmf.gf_eval(s);
        let g_deriv = pmf.gf_deriv(s);
        let zero = pmf.zero_mass();
        let (g_scalar, g_deriv_scalar) = match points.last() {
            None => (Some(g), Some(g_deriv)),
            Some(prev) if integer => {
                let (gs, gd) = (prev.g_scalar.unwrap_or(prev.g), prev.g_deriv_scalar.unwrap_or(prev.g_deriv));
                let hz = nu.pgf(prev.zero);
                let next = nu.pgf(gs) / s + (s - 1.0) / s * hz;
                let next_d = nu.pgf_deriv(gs) * gd / s - (nu.pgf(gs) - hz) / (s * s);
                (Some(next), Some(next_d))
            }
            Some(_) => (None, None),
        };
        points.push(GfTracePoint { n: rec.generation(), s, g, g_deriv, a: g - 1.0, zero, g_scalar, g_deriv_scalar });
        if !g.is_finite() {
            stop = StopReason::Condition;
            break;
        }
        if rec.generation() >= n_max {
            break;
        }
        if !rec.advance()? {
            stop = StopReason::SupportCap;
            break;
        }
    }
    let exact = rec.current().is_exact();
    let mut max_rel = 0.0f64;
    for p in points.iter().filter(|p| p.a <= CROSS_CHECK_A_CAP) {
        if let (Some(gs), Some(gd)) = (p.g_scalar, p.g_deriv_scalar) {
            max_rel = max_rel.max(rel_diff(gs, p.g)).max(rel_diff(gd, p.g_deriv));
        }
    }
    let cross_checked = integer && max_rel <= CROSS_CHECK_TOL;
    Ok(GfTrace { s, m: spec.m(), points, exact, cross_checked, max_rel_discrepancy: max_rel, stop })
}

/// Outcome of checking `G'_n(s) <= (m/s)^n G'_0(s)` for `1 <= n <= N_1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub s: f64,
    /// Cap on `a_n`.
    pub delta0: f64,
    /// `c0` with `h'(1+a) <= m + c0 a` on `[0, delta0]`.
    pub c0: f64,
    /// First `n` with `a_n >= delta0` or `G'_n >= 1/c0`; `None` if the trace
    /// never reaches a cap.
    pub n1: Option<usize>,
    /// Largest `n` checked.
    pub checked_to: usize,
    /// `(n, G'_n(s), (m/s)^n G'_0(s))`.
    pub rows: Vec<(usize, f64, f64)>,
    pub violations: Vec<usize>,
    /// Smallest `(rhs - lhs) / rhs` over checked rows with `rhs > 0`.
    pub min_margin: Option<f64>,
}

impl ContractionReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_contraction(trace: &GfTrace, nu: &OffspringLaw, delta0: f64) -> Result<ContractionReport> {
    let (s, m) = (trace.s, trace.m);
    if !(s > 1.0 && s < m) {
        return Err(Error::InvalidArgument(format!("contraction needs 1 < s < m, got s = {s}, m = {m}")));
    }
    if !(delta0 > 0.0) {
        return Err(Error::InvalidArgument(format!("delta0 = {delta0} must be positive")));
    }
    let c0 = nu.local_derivative_constant(delta0);
    let deriv_cap = if c0 > 0.0 { 1.0 / c0 } else { f64::INFINITY };
    let n1 = trace.points.iter().find(|p| p.a >= delta0 || p.g_deriv >= deriv_cap).map(|p| p.n);
    let last = trace.points.last().map(|p| p.n).unwrap_or(0);
    let checked_to = n1.unwrap_or(last).min(last);
    let g0 = trace.points.first().map(|p| p.g_deriv).unwrap_or(0.0);
    let ratio = m / s;
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let mut min_margin: Option<f64> = None;
    for p in trace.points.iter().filter(|p| p.n >= 1 && p.n <= checked_to) {
        let rhs = ratio.powi(p.n as i32) * g0;
        let lhs = p.g_deriv;
        if lhs > rhs * (1.0 + 1e-12) + 1e-300 {
            violations.push(p.n);
        }
        if rhs > 0.0 {
            let margin = (rhs - lhs) / rhs;
            min_margin = Some(min_margin.map_or(margin, |x: f64| x.min(margin)));
        }
        rows.push((p.n, lhs, rhs));
    }
    Ok(ContractionReport { s, delta0, c0, n1, checked_to, rows, violations, min_margin })
}

/// Knobs for the upper-bound runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperBoundConfig {
    /// Cap on `a_n` through `n = N` (the `delta0` analog).
    pub delta0: f64,
    /// Dropped `E(s^X)` per run relative to `a_0`.
    pub gf_rel_budget: f64,
    pub support_cap: usize,
}

impl Default for UpperBoundConfig {
    fn default() -> Self {
        Self { delta0: 1.0, gf_rel_budget: 1e-6, support_cap: DEFAULT_SUPPORT_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperBound {
    pub p: f64,
    pub s: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// Certified upper bound on `a_N(s)`.
    pub a_n: f64,
    /// `log(1 + a_N) / (m^N log s)`; a valid bound on `F_inf` whenever finite.
    pub f_upper: f64,
    /// `a_n < delta0` held for every `n <= N`.
    pub established: bool,
    /// Largest certified `a_n` over `n <= N`.
    pub a_max: f64,
}

/// `log(1 + a_N) / (m^N log s)` from iterates at a given `s > 1` and depth.
pub fn upper_bound_at(spec: &ModelSpec, s: f64, n: usize, cfg: &UpperBoundConfig) -> Result<UpperBound> {
    if !(s > 1.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("s = {s} must exceed 1")));
    }
    let m = spec.m();
    let x0 = make_initial(spec).with_tracked_gf(&[s])?;
    let a0 = x0.gf_eval(s) - 1.0;
    let policy = TruncationPolicy {
        mass_budget: f64::INFINITY,
        width: WidthBudget::Unlimited,
        gf_budget: cfg.gf_rel_budget * a0.max(0.0),
        support_cap: cfg.support_cap,
        horizon: n.max(1),
    };
    let mut rec = Recursion::with_pmf(spec, policy, x0);
    let a_up = |rec: &Recursion| {
        let g = rec.current().gf_upper(s);
        if g.is_nan() {
            return f64::INFINITY;
        }
        (g - 1.0 + GF_SLACK * g).max(0.0)
    };
    let mut a_max = a_up(&rec);
    while rec.generation() < n {
        if !rec.advance()? {
            return Err(Error::CapExceeded(format!(
                "support cap {} reached at generation {}",
                cfg.support_cap,
                rec.generation()
            )));
        }
        a_max = a_max.max(a_up(&rec));
    }
    let a_n = a_up(&rec);
    let f_upper = a_n.ln_1p() / (m.powi(n as i32) * s.ln());
    Ok(UpperBound {
        p: spec.p(),
        s,
        n,
        a_n,
        f_upper,
        established: a_max < cfg.delta0 && f_upper.is_finite(),
        a_max,
    })
}

/// Schedule `N = floor((c7 p)^(-1/(2+alpha)))`, `s = m e^(-1/N)` for tails
/// comparable to `x^alpha m^-x`.
pub fn critical_schedule(m: f64, alpha: f64, p: f64, c7: f64) -> Result<(f64, usize)> {
    if !(alpha > -2.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must exceed -2")));
    }
    if !(p > 0.0 && p <= 1.0 && c7 > 0.0) {
        return Err(Error::InvalidArgument(format!("need 0 < p <= 1 and c7 > 0, got p = {p}, c7 = {c7}")));
    }
    let n = (c7 * p).powf(-1.0 / (2.0 + alpha)).floor();
    if n < 1.0 {
        return Err(Error::InvalidArgument(format!("N = {n} < 1; decrease c7 or p")));
    }
    let n = n as usize;
    Ok((m * (-1.0 / n as f64).exp(), n))
}

/// Schedule `s = e^(theta - eps)`, `eps = 1/log(1/p)`,
/// `N' = floor(log(c9 eps^2 / p) / log(m / s))` for tails comparable to
/// `e^(-theta x)`.
pub fn power_law_schedule(m: f64, theta: f64, p: f64, c9: f64) -> Result<(f64, usize)> {
    if !(theta > 0.0 && theta < m.ln()) {
        return Err(Error::InvalidArgument(format!("theta = {theta} must lie in (0, log m)")));
    }
    if !(p > 0.0 && p < 1.0 && c9 > 0.0) {
        return Err(Error::InvalidArgument(format!("need 0 < p < 1 and c9 > 0, got p = {p}, c9 = {c9}")));
    }
    let eps = 1.0 / (1.0 / p).ln();
    if theta <= eps {
        return Err(Error::InvalidArgument(format!("p = {p} too large: s = e^(theta - eps) <= 1")));
    }
    let s = (theta - eps).exp();
    let n = ((c9 * eps * eps / p).ln() / (m / s).ln()).floor().max(0.0) as usize;
    Ok((s, n))
}

/// Upper bound for a model whose `Y_0` carries a critical tail (`alpha`).
pub fn upper_bound_critical(spec: &ModelSpec, c7: f64, cfg: &UpperBoundConfig) -> Result<UpperBound> {
    let alpha = match spec.tail() {
        Some(TailMeta::Critical { alpha }) => alpha,
        _ => return Err(Error::InvalidModel("model has no critical tail metadata".into())),
    };
    if spec.p() == 0.0 {
        return Ok(zero_bound(spec.m()));
    }
    let (s, n) = critical_schedule(spec.m(), alpha, spec.p(), c7)?;
    upper_bound_at(spec, s, n, cfg)
}

/// Upper bound for a model whose `Y_0` carries an exponential tail (`theta`).
pub fn upper_bound_power_law(spec: &ModelSpec, c9: f64, cfg: &UpperBoundConfig) -> Result<UpperBound> {
    let theta = match spec.tail() {
        Some(TailMeta::Exponential { theta }) => theta,
        _ => return Err(Error::InvalidModel("model has no exponential tail metadata".into())),
    };
    if spec.p() == 0.0 {
        return Ok(zero_bound(spec.m()));
    }
    let (s, n) = power_law_schedule(spec.m(), theta, spec.p(), c9)?;
    upper_bound_at(spec, s, n, cfg)
}

fn zero_bound(m: f64) -> UpperBound {
    UpperBound { p: 0.0, s: m, n: 0, a_n: 0.0, f_upper: 0.0, established: true, a_max: 0.0 }
}

/// `beta(theta) = log m / (log m - theta)`.
pub fn beta(theta: f64, m: f64) -> f64 {
    m.ln() / (m.ln() - theta)
}

/// `chi(alpha) = 1 / (alpha + 2)`.
pub fn chi(alpha: f64) -> f64 {
    1.0 / (alpha + 2.0)
}

/// CSV with columns `p,s,N,a_N,F_upper,established`.
pub fn write_bounds_csv<W: std::io::Write>(rows: &[UpperBound], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "s", "N", "a_N", "F_upper", "established"])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.p.to_string(),
            r.s.to_string(),
            r.n.to_string(),
            r.a_n.to_string(),
            r.f_upper.to_string(),
            r.established.to_string(),
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::iterate;
    use crate::pmf::{LatticePmf, LatticeStep};

    fn bernoulli(p: f64) -> ModelSpec {
        ModelSpec::new(OffspringLaw::deterministic(2).unwrap(), LatticePmf::point(LatticeStep::UNIT, 2), p).unwrap()
    }

    #[test]
    fn deterministic_start() {
        let t = gf_trace(&bernoulli(1.0), 1.5, 4).unwrap();
        for p in &t.points {
            let x = 2f64.powi(p.n as i32) + 1.0;
            assert!(rel_diff(p.g, 1.5f64.powf(x)) < 1e-14);
            assert!(rel_diff(p.g_scalar.unwrap(), p.g) < 1e-12);
        }
        assert!(t.cross_checked);
    }

    #[test]
    fn zero_p_trace() {
        let t = gf_trace(&bernoulli(0.0), 1.7, 10).unwrap();
        assert!(t.points.iter().all(|p| p.g == 1.0 && p.a == 0.0 && p.g_deriv == 0.0));
        let r = verify_contraction(&t, &OffspringLaw::deterministic(2).unwrap(), 0.5).unwrap();
        assert!(r.holds());
    }

    #[test]
    fn initial_values() {
        let p = 0.3;
        let t = gf_trace(&bernoulli(p), 1.4, 0).unwrap();
        let s: f64 = 1.4;
        assert!((t.points[0].g - (1.0 - p + p * s * s)).abs() < 1e-15);
        assert!((t.points[0].g_deriv - 2.0 * p * s).abs() < 1e-15);
    }

    #[test]
    fn scalar_recursion_matches_random_offspring() {
        let nu = OffspringLaw::new([(1, 0.2), (2, 0.5), (3, 0.3)]).unwrap();
        let y0 = LatticePmf::from_masses(LatticeStep::UNIT, [(1, 0.5), (3, 0.5)]).unwrap();
        let spec = ModelSpec::new(nu, y0, 0.1).unwrap();
        let t = gf_trace(&spec, 1.8, 12).unwrap();
        assert!(t.cross_checked, "{}", t.max_rel_discrepancy);
    }

    #[test]
    fn contraction_small_p() {
        let nu = OffspringLaw::deterministic(2).unwrap();
        let t = gf_trace(&bernoulli(0.05), 1.5, 25).unwrap();
        let r = verify_contraction(&t, &nu, 1.0).unwrap();
        assert!(r.holds());
        assert!(r.min_margin.unwrap() > 0.0);
        assert!(verify_contraction(&t, &nu, 1.0).is_ok());
        let t = gf_trace(&bernoulli(0.05), 2.5, 3).unwrap();
        assert!(verify_contraction(&t, &nu, 1.0).is_err());
    }

    #[test]
    fn contraction_range_restricted_at_p_one() {
        let nu = OffspringLaw::deterministic(2).unwrap();
        let t = gf_trace(&bernoulli(1.0), 1.5, 6).unwrap();
        let r = verify_contraction(&t, &nu, 1.0).unwrap();
        assert_eq!(r.n1, Some(0));
        assert!(r.rows.is_empty() && r.holds());
    }

    #[test]
    fn jensen_bound_on_iterates() {
        let trace = iterate(&bernoulli(0.4), 8, 0.0).unwrap();
        let t = gf_trace(&bernoulli(0.4), 1.3, 8).unwrap();
        for (r, g) in trace.records.iter().zip(&t.points) {
            assert!(r.mean_low <= g.a.ln_1p() / 1.3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn schedules() {
        let (s, n) = critical_schedule(2.0, 0.0, 0.01, 1.0).unwrap();
        assert_eq!(n, 10);
        assert!((s - 2.0 * (-0.1f64).exp()).abs() < 1e-15);
        assert!(critical_schedule(2.0, -2.0, 0.01, 1.0).is_err());
        let theta = 0.5 * 2f64.ln();
        let p = 2f64.powi(-10);
        let (s, n) = power_law_schedule(2.0, theta, p, 1.0).unwrap();
        let eps = 1.0 / (10.0 * 2f64.ln());
        assert!((s - (theta - eps).exp()).abs() < 1e-15);
        let want = ((eps * eps / p).ln() / (2.0 / s).ln()).floor() as usize;
        assert_eq!(n, want);
        assert!((beta(theta, 2.0) - 2.0).abs() < 1e-15);
        assert!((beta(1e-9, 2.0) - 1.0).abs() < 1e-8);
        assert_eq!(chi(0.0), 0.5);
    }

    #[test]
    fn upper_bound_dominates_sandwich() {
        let spec = bernoulli(0.5);
        let cfg = UpperBoundConfig::default();
        let trace = iterate(&spec, 6, 0.0).unwrap();
        for s in [1.2, 1.6] {
            let ub = upper_bound_at(&spec, s, 6, &cfg).unwrap();
            let r = &trace.records[6];
            assert!(ub.f_upper >= r.f_high * (1.0 - 1e-12));
            assert!(r.f_high >= r.f_low);
        }
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_bounds_csv(&[zero_bound(2.0)], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("p,s,N,a_N,F_upper,established\n0,2,0,0,0,true"));
    }
}
