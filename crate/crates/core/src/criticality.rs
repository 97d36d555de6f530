//! Certified supercritical/subcritical verdicts and brackets for `p_c`.
//!
//! Supercritical: some certified lower bound on `E(X_n)` exceeds `1/(m-1)`.
//! Subcritical: for some `s > m`, `a_n = E(s^X_n) - 1` satisfies
//! `m (1 + c(a_n) a_n) < s` where `h(1+a) - 1 <= m a (1 + c(a_n) a)` on
//! `[0, a_n]`; then `a_{n+1} <= (h(1+a_n) - 1)/s < a_n` and the sequence
//! stays bounded, which forces `F_inf = 0`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;

use crate::engine::{Recursion, TruncationPolicy, WidthBudget};
use crate::error::{Error, Result};
use crate::exact::ExactPmf;
use crate::model::{make_initial, ModelSpec, TailMeta};
use crate::offspring::OffspringLaw;
use crate::pmf::LatticePmf;

/// Relative slack applied to float evaluations of `E(s^X)`.
const GF_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supercritical,
    Subcritical,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub p: f64,
    /// Generation at which the certificate closed.
    pub witness_n: Option<usize>,
    /// Evaluation point of a subcritical certificate.
    pub s: Option<f64>,
    /// Certified lower bound on `E(X_n)` at the witness (supercritical).
    pub mean_low: Option<f64>,
    /// `1/(m-1)`.
    pub threshold: f64,
    /// Certified upper bound on `a_n(s)` at the witness (subcritical).
    pub a_n: Option<f64>,
    /// Local constant `c` used in the contraction check.
    pub c0_prime: Option<f64>,
    /// `s - m (1 + c a_n)` for subcritical, `mean_low - threshold` for
    /// supercritical.
    pub margin: Option<f64>,
    /// Number of generations examined.
    pub generations: usize,
}

impl Certificate {
    fn undecided(p: f64, threshold: f64, generations: usize) -> Self {
        Self {
            verdict: Verdict::Undecided,
            p,
            witness_n: None,
            s: None,
            mean_low: None,
            threshold,
            a_n: None,
            c0_prime: None,
            margin: None,
            generations,
        }
    }

    pub fn is_decided(&self) -> bool {
        self.verdict != Verdict::Undecided
    }
}

/// Budgets for one certificate run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyOptions {
    pub n_max: usize,
    /// Total first moment the run may drop, in free-energy units (dropped
    /// mean at step `n` divided by `m^n`). Must stay well below the free
    /// energy for supercritical runs to close.
    pub width_budget: f64,
    /// Total `E(s^X)` the run may drop at each tracked point.
    pub gf_budget: f64,
    /// Points with `a_n` above this are abandoned so they stop blocking
    /// truncation.
    pub a_cap: f64,
    pub support_cap: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            n_max: 4000,
            width_budget: 1e-200,
            gf_budget: 1e-8,
            a_cap: 1e3,
            support_cap: 1 << 20,
        }
    }
}

impl CertifyOptions {
    pub fn with_n_max(n_max: usize) -> Self {
        Self { n_max, ..Self::default() }
    }
}

/// Grid `s_j = m (1 + 2^-j)`, `j = 0..=10`.
pub fn default_s_grid(m: f64) -> Vec<f64> {
    (0..=10).map(|j| m * (1.0 + 0.5f64.powi(j))).collect()
}

/// Local constant on `[0, a_up]` and the margin `s - m (1 + c a_up)`.
fn contraction(nu: &OffspringLaw, s: f64, a_up: f64) -> (f64, f64) {
    let c = nu.local_quadratic_constant(a_up);
    let margin = s - nu.mean() * (1.0 + c * a_up);
    (c, margin)
}

struct Checks {
    supercritical: bool,
    s_grid: Vec<f64>,
}

fn run(spec: &ModelSpec, checks: Checks, opts: &CertifyOptions) -> Result<Certificate> {
    let m = spec.m();
    let threshold = 1.0 / (m - 1.0);
    let p = spec.p();
    let mut s_live = checks.s_grid.clone();
    let x0 = make_initial(spec).with_tracked_gf(&s_live)?;
    let policy = TruncationPolicy {
        mass_budget: f64::INFINITY,
        width: WidthBudget::Absolute(opts.width_budget),
        gf_budget: opts.gf_budget,
        support_cap: opts.support_cap,
        horizon: opts.n_max,
    };
    let mut rec = Recursion::with_pmf(spec, policy, x0);
    loop {
        let n = rec.generation();
        let pmf = rec.current();
        if let Some(cert) = inspect(spec, pmf, n, &checks, &s_live, threshold) {
            return Ok(cert);
        }
        if s_live.is_empty() && !checks.supercritical {
            return Ok(Certificate::undecided(p, threshold, n));
        }
        if n >= opts.n_max {
            return Ok(Certificate::undecided(p, threshold, n));
        }
        // Abandon hopeless points before the next truncation.
        let drop: Vec<f64> = s_live
            .iter()
            .copied()
            .filter(|&s| !(pmf.gf_upper(s) - 1.0 <= opts.a_cap))
            .collect();
        if !drop.is_empty() {
            s_live.retain(|s| !drop.contains(s));
            rec.retain_tracked(|s| !drop.contains(&s));
        }
        if !rec.advance()? {
            return Ok(Certificate::undecided(p, threshold, n));
        }
    }
}

fn inspect(
    spec: &ModelSpec,
    pmf: &LatticePmf,
    n: usize,
    checks: &Checks,
    s_live: &[f64],
    threshold: f64,
) -> Option<Certificate> {
    let p = spec.p();
    if checks.supercritical && n >= 1 {
        let low = pmf.mean();
        if low > threshold {
            return Some(Certificate {
                verdict: Verdict::Supercritical,
                witness_n: Some(n),
                mean_low: Some(low),
                margin: Some(low - threshold),
                ..Certificate::undecided(p, threshold, n)
            });
        }
    }
    for &s in s_live {
        let g = pmf.gf_upper(s);
        if !g.is_finite() {
            continue;
        }
        let a_up = (g * (1.0 + GF_SLACK) - 1.0).max(0.0);
        let (c, margin) = contraction(spec.nu(), s, a_up);
        if margin > 0.0 {
            return Some(Certificate {
                verdict: Verdict::Subcritical,
                witness_n: Some(n),
                s: Some(s),
                a_n: Some(a_up),
                c0_prime: Some(c),
                margin: Some(margin),
                ..Certificate::undecided(p, threshold, n)
            });
        }
    }
    None
}

/// Supercritical verdict iff the certified `E(X_n)` exceeds `1/(m-1)` for
/// some `1 <= n <= n_max`.
pub fn certify_supercritical(spec: &ModelSpec, n_max: usize) -> Result<Certificate> {
    let opts = CertifyOptions::with_n_max(n_max);
    run(spec, Checks { supercritical: true, s_grid: Vec::new() }, &opts)
}

/// Subcritical verdict from the contraction condition at a fixed `s > m`.
pub fn certify_subcritical(spec: &ModelSpec, s: f64, n_max: usize) -> Result<Certificate> {
    certify_subcritical_with(spec, &[s], &CertifyOptions::with_n_max(n_max))
}

/// Subcritical check on several points at once; the first point to satisfy
/// the contraction condition wins.
pub fn certify_subcritical_with(spec: &ModelSpec, s_grid: &[f64], opts: &CertifyOptions) -> Result<Certificate> {
    let m = spec.m();
    if let Some(&s) = s_grid.iter().find(|&&s| !(s > m && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("evaluation point s = {s} must exceed m = {m}")));
    }
    if s_grid.is_empty() {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    run(spec, Checks { supercritical: false, s_grid: s_grid.to_vec() }, opts)
}

/// Runs both checks on one recursion; whichever closes first decides.
pub fn certify(spec: &ModelSpec, opts: &CertifyOptions) -> Result<Certificate> {
    let s_grid = default_s_grid(spec.m());
    run(spec, Checks { supercritical: true, s_grid }, opts)
}

fn check_theorem_a_inputs(step_is_unit: bool, nu: &OffspringLaw) -> Result<u32> {
    if !step_is_unit {
        return Err(Error::Unsupported("closed-form p_c needs an integer-valued Y_0".into()));
    }
    nu.deterministic_value()
        .ok_or_else(|| Error::Unsupported("closed-form p_c needs a deterministic offspring count".into()))
}

/// `1 / (max(E[((m-1) Y_0 - 1) m^Y_0], 0) + 1)` for deterministic `nu = m`.
pub fn pc_theorem_a(y0: &LatticePmf, nu: &OffspringLaw) -> Result<f64> {
    let m = check_theorem_a_inputs(y0.step().is_unit(), nu)? as f64;
    if y0.zero_mass() > 0.0 || !y0.is_exact() {
        return Err(Error::InvalidArgument("y0 must be an exact law on {1, 2, ...}".into()));
    }
    let e: f64 = y0
        .iter()
        .map(|(k, q)| q * ((m - 1.0) * k as f64 - 1.0) * m.powf(k as f64))
        .sum();
    Ok(1.0 / (e.max(0.0) + 1.0))
}

/// Exact rational version of [`pc_theorem_a`].
pub fn pc_theorem_a_exact(y0: &ExactPmf, nu: &OffspringLaw) -> Result<BigRational> {
    let m = check_theorem_a_inputs(y0.step().is_unit(), nu)?;
    if y0.masses().contains_key(&0) {
        return Err(Error::InvalidArgument("y0 must live on {1, 2, ...}".into()));
    }
    let mb = BigInt::from(m);
    let mut e = BigRational::zero();
    for (&k, q) in y0.masses() {
        let coef = BigInt::from(m - 1) * BigInt::from(k) - 1;
        let pow = num_traits::pow(mb.clone(), k);
        e += q * BigRational::from_integer(coef * pow);
    }
    if e.is_negative() {
        e = BigRational::zero();
    }
    Ok(BigRational::one() / (e + BigRational::one()))
}

/// Certified bracket around `p_c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
    pub lo_certificate: Certificate,
    pub hi_certificate: Certificate,
    /// True when the requested width was reached.
    pub converged: bool,
    pub evaluations: usize,
    /// Points strictly inside the bracket that could not be decided.
    pub undecided: Vec<f64>,
}

impl Bracket {
    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }
}

/// Bisection on certified verdicts only.
///
/// Both endpoints must certify (subcritical at `p_lo`, supercritical at
/// `p_hi`). Undecided probes are kept aside and later probes go to the
/// larger certified-free gap; if no gap can be narrowed further the widest
/// certified bracket is returned with `converged = false`.
pub fn pc_bisect<F>(family: F, p_lo: f64, p_hi: f64, tol: f64, opts: &CertifyOptions) -> Result<Bracket>
where
    F: Fn(f64) -> Result<ModelSpec> + Sync,
{
    if !(0.0..=1.0).contains(&p_lo) || !(0.0..=1.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::InvalidArgument(format!("need 0 <= p_lo < p_hi <= 1, got [{p_lo}, {p_hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let (lo_c, hi_c) = rayon::join(|| family(p_lo).and_then(|s| certify(&s, opts)), || {
        family(p_hi).and_then(|s| certify(&s, opts))
    });
    let (mut lo_cert, mut hi_cert) = (lo_c?, hi_c?);
    if lo_cert.verdict != Verdict::Subcritical || hi_cert.verdict != Verdict::Supercritical {
        return Err(Error::BracketNotEstablished(format!(
            "p_lo = {p_lo}: {:?}, p_hi = {p_hi}: {:?}",
            lo_cert.verdict, hi_cert.verdict
        )));
    }
    let (mut lo, mut hi) = (p_lo, p_hi);
    let mut evaluations = 2;
    // Undecided probes inside (lo, hi), kept as their hull.
    let mut hull: Option<(f64, f64)> = None;
    let min_gap = tol * 1e-3;
    while hi - lo > tol {
        let probe = match hull {
            None => 0.5 * (lo + hi),
            Some((u, v)) => {
                let (g1, g2) = (u - lo, hi - v);
                if g1.max(g2) <= min_gap {
                    break;
                }
                if g1 >= g2 {
                    0.5 * (lo + u)
                } else {
                    0.5 * (v + hi)
                }
            }
        };
        let cert = certify(&family(probe)?, opts)?;
        evaluations += 1;
        match cert.verdict {
            Verdict::Supercritical => {
                hi = probe;
                hi_cert = cert;
            }
            Verdict::Subcritical => {
                lo = probe;
                lo_cert = cert;
            }
            Verdict::Undecided => {
                hull = Some(match hull {
                    None => (probe, probe),
                    Some((u, v)) => (u.min(probe), v.max(probe)),
                });
            }
        }
        hull = hull.and_then(|(u, v)| {
            let (u, v) = (u.max(lo), v.min(hi));
            (u < hi && v > lo && u <= v).then_some((u, v))
        });
    }
    let undecided = match hull {
        Some((u, v)) if u == v => vec![u],
        Some((u, v)) => vec![u, v],
        None => Vec::new(),
    };
    Ok(Bracket {
        lo,
        hi,
        width: hi - lo,
        lo_certificate: lo_cert,
        hi_certificate: hi_cert,
        converged: hi - lo <= tol,
        evaluations,
        undecided,
    })
}

/// Tail class of `Y_0` for [`positivity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailClass {
    FiniteSupport,
    Parametric(TailMeta),
}

/// Whether `p_c > 0`.
///
/// Bounded `Y_0` and exponential tails with `theta > log m` give `p_c > 0`;
/// `theta < log m` or a critical tail with `alpha > -2` give `p_c = 0`. A
/// critical tail with `alpha <= -2` is decided only for deterministic `nu`,
/// where `p_c > 0` iff `E(Y_0 m^Y_0) < inf`, i.e. `alpha < -2`.
pub fn positivity_check(tail: TailClass, nu: &OffspringLaw) -> Result<bool> {
    let log_m = nu.mean().ln();
    match tail {
        TailClass::FiniteSupport => Ok(true),
        TailClass::Parametric(TailMeta::Exponential { theta }) => {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(Error::InvalidArgument(format!("theta = {theta} must be positive")));
            }
            if theta == log_m {
                // comparable to x^0 m^-x
                return positivity_check(TailClass::Parametric(TailMeta::Critical { alpha: 0.0 }), nu);
            }
            Ok(theta > log_m)
        }
        TailClass::Parametric(TailMeta::Critical { alpha }) => {
            if !alpha.is_finite() {
                return Err(Error::InvalidArgument(format!("alpha = {alpha} must be finite")));
            }
            if alpha > -2.0 {
                Ok(false)
            } else if nu.is_deterministic() {
                Ok(alpha < -2.0)
            } else {
                Err(Error::Unsupported(format!(
                    "p_c > 0 is not decided for alpha = {alpha} with random offspring"
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ratio;
    use crate::pmf::LatticeStep;

    fn bernoulli(p: f64) -> ModelSpec {
        ModelSpec::new(OffspringLaw::deterministic(2).unwrap(), LatticePmf::point(LatticeStep::UNIT, 2), p).unwrap()
    }

    #[test]
    fn theorem_a_examples() {
        let nu2 = OffspringLaw::deterministic(2).unwrap();
        let nu3 = OffspringLaw::deterministic(3).unwrap();
        let d = |k| LatticePmf::point(LatticeStep::UNIT, k);
        assert!((pc_theorem_a(&d(2), &nu2).unwrap() - 0.2).abs() < 1e-15);
        assert!((pc_theorem_a(&d(3), &nu2).unwrap() - 1.0 / 17.0).abs() < 1e-15);
        assert_eq!(pc_theorem_a(&d(1), &nu2).unwrap(), 1.0);
        // (2*2 - 1) * 9 + 1 = 28
        assert!((pc_theorem_a(&d(2), &nu3).unwrap() - 1.0 / 28.0).abs() < 1e-15);
        let ex = |k| ExactPmf::point(LatticeStep::UNIT, k);
        assert_eq!(pc_theorem_a_exact(&ex(2), &nu2).unwrap(), ratio(1, 5));
        assert_eq!(pc_theorem_a_exact(&ex(3), &nu2).unwrap(), ratio(1, 17));
        assert_eq!(pc_theorem_a_exact(&ex(2), &nu3).unwrap(), ratio(1, 28));
        assert_eq!(pc_theorem_a_exact(&ex(1), &nu2).unwrap(), ratio(1, 1));
    }

    #[test]
    fn theorem_a_rejects_unsupported() {
        let random = OffspringLaw::uniform(&[1, 3]).unwrap();
        let d2 = LatticePmf::point(LatticeStep::UNIT, 2);
        assert!(matches!(pc_theorem_a(&d2, &random), Err(Error::Unsupported(_))));
        let half = LatticePmf::point(LatticeStep::unit_fraction(2).unwrap(), 3);
        let nu2 = OffspringLaw::deterministic(2).unwrap();
        assert!(matches!(pc_theorem_a(&half, &nu2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncated_geometric_theorem_a_decreases() {
        // P(Y = k) = 2^-k truncated at K: E(Y 2^Y) diverges as K grows.
        let nu2 = OffspringLaw::deterministic(2).unwrap();
        let mut prev = 1.0;
        for kmax in [2usize, 4, 8, 16, 32] {
            let w: Vec<f64> = (1..=kmax).map(|k| 0.5f64.powi(k as i32)).collect();
            let z: f64 = w.iter().sum();
            let y0 = LatticePmf::from_masses(LatticeStep::UNIT, (1..=kmax).map(|k| (k, w[k - 1] / z))).unwrap();
            let pc = pc_theorem_a(&y0, &nu2).unwrap();
            assert!(pc < prev);
            prev = pc;
        }
        assert!(prev < 0.1);
    }

    #[test]
    fn supercritical_examples() {
        let c = certify_supercritical(&bernoulli(1.0), 10).unwrap();
        assert_eq!(c.verdict, Verdict::Supercritical);
        assert_eq!(c.witness_n, Some(1));
        assert_eq!(c.mean_low, Some(3.0));
        let c = certify_supercritical(&bernoulli(0.0), 50).unwrap();
        assert_eq!(c.verdict, Verdict::Undecided);
        let c = certify_supercritical(&bernoulli(0.3), 200).unwrap();
        assert_eq!(c.verdict, Verdict::Supercritical);
    }

    #[test]
    fn subcritical_examples() {
        let c = certify_subcritical(&bernoulli(0.0), 2.5, 10).unwrap();
        assert_eq!((c.verdict, c.witness_n), (Verdict::Subcritical, Some(0)));
        assert!(c.a_n.unwrap() < 1e-9);
        let c = certify_subcritical(&bernoulli(0.1), 3.0, 10).unwrap();
        assert_eq!(c.verdict, Verdict::Subcritical);
        assert_eq!(c.witness_n, Some(0));
        assert!((c.a_n.unwrap() - 0.8).abs() < 1e-9);
        assert!((c.margin.unwrap() - 0.2).abs() < 1e-9);
        let c = certify_subcritical(&bernoulli(0.5), 3.0, 30).unwrap();
        assert_eq!(c.verdict, Verdict::Undecided);
        assert!(certify_subcritical(&bernoulli(0.1), 2.0, 10).is_err());
    }

    #[test]
    fn verdicts_never_conflict() {
        for &p in &[0.05, 0.15, 0.19, 0.21, 0.3, 0.6] {
            let spec = bernoulli(p);
            let sup = certify_supercritical(&spec, 300).unwrap();
            let sub = certify_subcritical_with(&spec, &default_s_grid(2.0), &CertifyOptions::with_n_max(300)).unwrap();
            assert!(!(sup.is_decided() && sub.is_decided()), "p = {p}");
            assert_eq!(sup.is_decided(), p > 0.2, "p = {p}");
        }
    }

    #[test]
    fn bracket_requires_certified_endpoints() {
        let fam = |p| bernoulli(1.0).with_p(p);
        let err = pc_bisect(fam, 0.25, 0.3, 1e-2, &CertifyOptions::with_n_max(200)).unwrap_err();
        assert!(matches!(err, Error::BracketNotEstablished(_)));
        let b = pc_bisect(fam, 0.1, 0.3, 1e-2, &CertifyOptions::with_n_max(500)).unwrap();
        assert!(b.converged && b.contains(0.2) && b.width <= 1e-2);
        assert_eq!(b.lo_certificate.verdict, Verdict::Subcritical);
        assert_eq!(b.hi_certificate.verdict, Verdict::Supercritical);
    }

    #[test]
    fn never_subcritical_just_above_pc() {
        // F > 0 here, so a_n(s) is unbounded for every s > m; the far tail
        // underflows long before and must not be silently lost
        let opts = CertifyOptions { n_max: 1000, ..CertifyOptions::default() };
        let c = certify(&bernoulli(0.2000001), &opts).unwrap();
        assert_ne!(c.verdict, Verdict::Subcritical, "{c:?}");
        let c = certify(&bernoulli(0.1999), &opts).unwrap();
        assert_eq!(c.verdict, Verdict::Subcritical, "{c:?}");
    }

    #[test]
    fn positivity_examples() {
        let nu2 = OffspringLaw::deterministic(2).unwrap();
        let l2 = 2f64.ln();
        assert!(positivity_check(TailClass::FiniteSupport, &nu2).unwrap());
        let exp = |theta| TailClass::Parametric(TailMeta::Exponential { theta });
        let crit = |alpha| TailClass::Parametric(TailMeta::Critical { alpha });
        assert!(!positivity_check(exp(0.5 * l2), &nu2).unwrap());
        assert!(positivity_check(exp(2.0 * l2), &nu2).unwrap());
        assert!(!positivity_check(exp(l2), &nu2).unwrap());
        assert!(!positivity_check(crit(0.0), &nu2).unwrap());
        assert!(!positivity_check(crit(-2.0), &nu2).unwrap());
        assert!(positivity_check(crit(-2.5), &nu2).unwrap());
        let random = OffspringLaw::uniform(&[1, 3]).unwrap();
        assert!(positivity_check(crit(-3.0), &random).is_err());
        assert!(!positivity_check(crit(-1.0), &random).unwrap());
    }
}
