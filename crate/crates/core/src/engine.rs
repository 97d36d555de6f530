//! Depth-n driver for the recursion and the free-energy sandwich
//! `(E X_n - 1/(m-1)) / m^n <= F_inf <= E X_n / m^n`.

use serde::Serialize;
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{make_initial, ModelSpec};
use crate::pmf::{LatticePmf, TruncationBudget};

/// Dense span above which the driver stops instead of growing further.
pub const DEFAULT_SUPPORT_CAP: usize = 1 << 22;

/// How the per-step removed first moment is limited, expressed as its
/// contribution to the width of the free-energy interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WidthBudget {
    /// Only the mass budget applies.
    Unlimited,
    /// Total contribution at most this much.
    Absolute(f64),
    /// Contribution at most `rel` times the current certified lower bound on
    /// the free energy, and at least `floor`.
    Relative { rel: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationPolicy {
    /// Total mass the run may move down to 0; without a horizon, step
    /// `n >= 1` may move `mass_budget * 2^-n`.
    pub mass_budget: f64,
    pub width: WidthBudget,
    /// Total removable `E(s^X)` at each tracked point, same geometric schedule.
    pub gf_budget: f64,
    pub support_cap: usize,
    /// Expected run length. Half of each budget follows the geometric
    /// schedule and the other half is spread evenly over this many steps, so
    /// long runs keep truncating while totals stay within budget.
    pub horizon: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            mass_budget: 1e-12,
            width: WidthBudget::Unlimited,
            gf_budget: f64::INFINITY,
            support_cap: DEFAULT_SUPPORT_CAP,
            horizon: 1,
        }
    }
}

impl TruncationPolicy {
    pub fn exact() -> Self {
        Self { mass_budget: 0.0, ..Self::default() }
    }

    pub fn with_mass_budget(mass_budget: f64) -> Self {
        Self { mass_budget, ..Self::default() }
    }

    fn step_budget(&self, n: usize, m: f64, f_low: f64) -> TruncationBudget {
        let share = if self.horizon <= 1 {
            0.5f64.powi(n as i32)
        } else if n > self.horizon {
            0.0
        } else {
            0.5 * 0.5f64.powi(n as i32) + 0.5 / self.horizon as f64
        };
        let width = match self.width {
            WidthBudget::Unlimited => f64::INFINITY,
            WidthBudget::Absolute(w) => w,
            WidthBudget::Relative { rel, floor } => (rel * f_low.max(0.0)).max(floor),
        };
        if share == 0.0 {
            return TruncationBudget { mass: 0.0, mean: 0.0, gf: 0.0 };
        }
        TruncationBudget {
            mass: self.mass_budget * share,
            mean: width * share * m.powi(n as i32),
            gf: self.gf_budget * share,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GfSample {
    pub s: f64,
    pub g: f64,
    pub g_deriv: f64,
}

/// Certified statistics of one generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRecord {
    pub n: usize,
    pub mean_low: f64,
    pub mean_high: f64,
    pub zero_mass: f64,
    pub support_size: usize,
    pub dropped: f64,
    pub dropped_mean_bound: f64,
    /// Raw lower sandwich value; may be negative.
    pub f_low: f64,
    pub f_high: f64,
    pub gf: Vec<GfSample>,
}

impl GenerationRecord {
    pub fn from_pmf(n: usize, pmf: &LatticePmf, m: f64, gf_points: &[f64]) -> Self {
        let mean_low = pmf.mean();
        let mean_high = pmf.mean_upper();
        let scale = m.powi(n as i32);
        Self {
            n,
            mean_low,
            mean_high,
            zero_mass: pmf.zero_mass(),
            support_size: pmf.support_size(),
            dropped: pmf.dropped(),
            dropped_mean_bound: pmf.dropped_mean_bound(),
            f_low: (mean_low - 1.0 / (m - 1.0)) / scale,
            f_high: mean_high / scale,
            gf: gf_points
                .iter()
                .map(|&s| GfSample { s, g: pmf.gf_eval(s), g_deriv: pmf.gf_deriv(s) })
                .collect(),
        }
    }

    /// Contribution of truncation to the sandwich width at this generation.
    pub fn truncation_width(&self, m: f64) -> f64 {
        self.dropped_mean_bound / m.powi(self.n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Reached the requested depth.
    Completed,
    /// The next generation would exceed the support cap.
    SupportCap,
    /// Free-energy tolerance met.
    ToleranceReached,
    /// A caller-supplied stopping condition fired.
    Condition,
}

/// Stepwise driver over generations.
#[derive(Debug, Clone)]
pub struct Recursion<'a> {
    spec: &'a ModelSpec,
    policy: TruncationPolicy,
    current: LatticePmf,
    n: usize,
    best_f_low: f64,
}

impl<'a> Recursion<'a> {
    pub fn new(spec: &'a ModelSpec, policy: TruncationPolicy) -> Self {
        Self::with_pmf(spec, policy, make_initial(spec))
    }

    /// Start from a caller-prepared generation-0 law, e.g. one that tracks
    /// generating-function remainders.
    pub fn with_pmf(spec: &'a ModelSpec, policy: TruncationPolicy, x0: LatticePmf) -> Self {
        Self { spec, policy, current: x0, n: 0, best_f_low: f64::NEG_INFINITY }
    }

    pub fn generation(&self) -> usize {
        self.n
    }

    pub fn current(&self) -> &LatticePmf {
        &self.current
    }

    pub fn m(&self) -> f64 {
        self.spec.m()
    }

    /// Advance one generation. Returns `Ok(false)` without advancing when the
    /// support cap would be exceeded.
    pub fn advance(&mut self) -> Result<bool> {
        // span of the nu-mixture before the shift and truncation
        let min_k = self.spec.nu().probs()[0].0 as f64;
        let hi = self.current.max_index().unwrap_or(0) as f64 * self.spec.nu().max_k() as f64;
        let lo = self.current.min_index().unwrap_or(0) as f64 * min_k;
        if hi - lo > (2 * self.policy.support_cap) as f64 {
            return Ok(false);
        }
        let m = self.m();
        let stepped = self.current.dr_step(self.spec.nu())?;
        let n = self.n + 1;
        let budget = self.policy.step_budget(n, m, self.best_f_low);
        let next = if budget.mass > 0.0 { stepped.lower_tail_with(budget) } else { stepped };
        if next.span() > self.policy.support_cap {
            return Ok(false);
        }
        self.current = next;
        self.n = n;
        let f_low = (self.current.mean() - 1.0 / (m - 1.0)) / m.powi(n as i32);
        self.best_f_low = self.best_f_low.max(f_low);
        Ok(true)
    }

    /// See [`LatticePmf::retain_tracked`].
    pub fn retain_tracked<F: Fn(f64) -> bool>(&mut self, keep: F) {
        self.current.retain_tracked(keep);
    }

    pub fn record(&self, gf_points: &[f64]) -> GenerationRecord {
        GenerationRecord::from_pmf(self.n, &self.current, self.m(), gf_points)
    }
}

/// Per-generation certified statistics for generations `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub m: f64,
    pub p: f64,
    pub records: Vec<GenerationRecord>,
    pub stop: StopReason,
    /// Law of the last generation reached.
    pub last: LatticePmf,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    n: usize,
    mean_low: f64,
    mean_high: f64,
    zero_mass: f64,
    support_size: usize,
    dropped: f64,
    #[serde(rename = "F_low")]
    f_low: f64,
    #[serde(rename = "F_high")]
    f_high: f64,
}

impl IterationTrace {
    pub fn last_generation(&self) -> usize {
        self.records.last().map(|r| r.n).unwrap_or(0)
    }

    pub fn record(&self, n: usize) -> Option<&GenerationRecord> {
        self.records.get(n).filter(|r| r.n == n)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(CsvRow {
                n: r.n,
                mean_low: r.mean_low,
                mean_high: r.mean_high,
                zero_mass: r.zero_mass,
                support_size: r.support_size,
                dropped: r.dropped,
                f_low: r.f_low,
                f_high: r.f_high,
            })
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(())
    }

    /// Generations where the sandwich fails to be monotone by more than the
    /// certified truncation width (plus float slack).
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        for w in self.records.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let slack = b.truncation_width(self.m) + 1e-12 * (1.0 + a.f_high.abs());
            if b.f_low < a.f_low - slack || b.f_high > a.f_high + slack {
                bad.push(b.n);
            }
        }
        bad
    }
}

/// Iterate to depth `n_max`, removing at most `budget * 2^-n` mass at step `n`.
pub fn iterate(spec: &ModelSpec, n_max: usize, budget: f64) -> Result<IterationTrace> {
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget} must be nonnegative")));
    }
    iterate_with(spec, n_max, TruncationPolicy::with_mass_budget(budget), &[])
}

pub fn iterate_with(
    spec: &ModelSpec,
    n_max: usize,
    policy: TruncationPolicy,
    gf_points: &[f64],
) -> Result<IterationTrace> {
    let mut rec = Recursion::new(spec, policy);
    let mut records = vec![rec.record(gf_points)];
    let mut stop = StopReason::Completed;
    while rec.generation() < n_max {
        if !rec.advance()? {
            stop = StopReason::SupportCap;
            break;
        }
        records.push(rec.record(gf_points));
    }
    Ok(IterationTrace { m: spec.m(), p: spec.p(), records, stop, last: rec.current().clone() })
}

/// One generation's free-energy bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sandwich {
    pub n: usize,
    /// `(mean_low - 1/(m-1)) / m^n`, possibly negative.
    pub low_raw: f64,
    /// `max(low_raw, 0)`.
    pub low: f64,
    pub high: f64,
}

pub fn free_energy_sandwich(trace: &IterationTrace, n: usize) -> Result<Sandwich> {
    let r = trace
        .record(n)
        .ok_or_else(|| Error::InvalidArgument(format!("generation {n} not in trace")))?;
    Ok(Sandwich { n, low_raw: r.f_low, low: r.f_low.max(0.0), high: r.f_high })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyConfig {
    /// Stop once `high - low <= abs_tol` (0 disables).
    pub abs_tol: f64,
    /// Stop once `high - low <= rel_tol * low` with `low > 0` (0 disables).
    pub rel_tol: f64,
    pub n_cap: usize,
    pub mass_budget: f64,
    pub support_cap: usize,
}

impl FreeEnergyConfig {
    pub fn absolute(tol: f64, n_cap: usize) -> Self {
        Self { abs_tol: tol, rel_tol: 0.0, n_cap, mass_budget: 1e-12, support_cap: DEFAULT_SUPPORT_CAP }
    }

    pub fn relative(rel: f64, n_cap: usize) -> Self {
        Self { abs_tol: 0.0, rel_tol: rel, n_cap, mass_budget: 1e-12, support_cap: DEFAULT_SUPPORT_CAP }
    }

    fn policy(&self) -> TruncationPolicy {
        let width = if self.rel_tol > 0.0 {
            WidthBudget::Relative { rel: self.rel_tol / 4.0, floor: self.abs_tol / 4.0 }
        } else if self.abs_tol > 0.0 {
            WidthBudget::Absolute(self.abs_tol / 4.0)
        } else {
            WidthBudget::Absolute(0.0)
        };
        TruncationPolicy {
            mass_budget: self.mass_budget,
            width,
            gf_budget: f64::INFINITY,
            support_cap: self.support_cap,
            horizon: self.n_cap,
        }
    }

    fn satisfied(&self, low: f64, high: f64) -> bool {
        let width = high - low;
        (self.abs_tol > 0.0 && width <= self.abs_tol) || (self.rel_tol > 0.0 && low > 0.0 && width <= self.rel_tol * low)
    }
}

/// Tightest certified free-energy interval found up to the depth cap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeEnergy {
    pub p: f64,
    pub low: f64,
    pub high: f64,
    /// Best raw lower sandwich value (negative means nothing certified).
    pub low_raw: f64,
    pub n_used: usize,
    pub reached: bool,
    pub stop: StopReason,
}

impl FreeEnergy {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.high + self.low)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

pub fn free_energy(spec: &ModelSpec, tol: f64, n_cap: usize) -> Result<FreeEnergy> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    free_energy_with(spec, &FreeEnergyConfig::absolute(tol, n_cap))
}

pub fn free_energy_with(spec: &ModelSpec, cfg: &FreeEnergyConfig) -> Result<FreeEnergy> {
    if cfg.abs_tol <= 0.0 && cfg.rel_tol <= 0.0 {
        return Err(Error::InvalidArgument("need a positive absolute or relative tolerance".into()));
    }
    let m = spec.m();
    let mut rec = Recursion::new(spec, cfg.policy());
    let first = rec.record(&[]);
    let mut low_raw = first.f_low;
    let mut high = first.f_high;
    let mut n_used = 0;
    let mut stop = StopReason::Completed;
    let mut reached = cfg.satisfied(low_raw.max(0.0), high);
    while !reached && rec.generation() < cfg.n_cap {
        if !rec.advance()? {
            stop = StopReason::SupportCap;
            break;
        }
        let r = GenerationRecord::from_pmf(rec.generation(), rec.current(), m, &[]);
        low_raw = low_raw.max(r.f_low);
        high = high.min(r.f_high);
        n_used = r.n;
        reached = cfg.satisfied(low_raw.max(0.0), high);
    }
    if reached {
        stop = StopReason::ToleranceReached;
    }
    Ok(FreeEnergy { p: spec.p(), low: low_raw.max(0.0), high, low_raw, n_used, reached, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;
    use crate::pmf::LatticeStep;

    fn bernoulli(p: f64) -> ModelSpec {
        ModelSpec::new(OffspringLaw::deterministic(2).unwrap(), LatticePmf::point(LatticeStep::UNIT, 2), p).unwrap()
    }

    #[test]
    fn deterministic_start_follows_closed_form() {
        let trace = iterate(&bernoulli(1.0), 12, 0.0).unwrap();
        for r in &trace.records {
            let want = 2f64.powi(r.n as i32) + 1.0;
            assert_eq!(r.mean_low, want);
            assert_eq!(r.mean_high, want);
        }
        let s = free_energy_sandwich(&trace, 3).unwrap();
        assert_eq!(s.low_raw, 1.0);
        assert_eq!(s.high, 9.0 / 8.0);
    }

    #[test]
    fn zero_p_is_zero() {
        let trace = iterate(&bernoulli(0.0), 8, 1e-12).unwrap();
        assert!(trace.records.iter().all(|r| r.mean_high == 0.0 && r.f_high == 0.0 && r.f_low < 0.0));
        let fe = free_energy(&bernoulli(0.0), 1e-9, 50).unwrap();
        assert_eq!((fe.low, fe.high), (0.0, 0.0));
        assert!(fe.reached);
    }

    #[test]
    fn half_after_one_step() {
        let trace = iterate(&bernoulli(0.5), 1, 1e-12).unwrap();
        let r = &trace.records[1];
        assert!(r.mean_low <= 1.25 && 1.25 <= r.mean_high);
    }

    #[test]
    fn widths_without_truncation() {
        let trace = iterate(&bernoulli(0.5), 10, 0.0).unwrap();
        for r in &trace.records {
            let w = r.f_high - r.f_low;
            assert!((w - 1.0 / 2f64.powi(r.n as i32)).abs() < 1e-12);
        }
        assert!(trace.monotonicity_violations().is_empty());
    }

    #[test]
    fn free_energy_closed_form() {
        let fe = free_energy(&bernoulli(1.0), 1e-6, 60).unwrap();
        assert!(fe.reached);
        assert!(fe.low <= 1.0 && 1.0 <= fe.high && fe.width() <= 1e-6);
    }

    #[test]
    fn support_cap_stops_cleanly() {
        let policy = TruncationPolicy { support_cap: 64, ..TruncationPolicy::exact() };
        let trace = iterate_with(&bernoulli(0.5), 30, policy, &[]).unwrap();
        assert_eq!(trace.stop, StopReason::SupportCap);
        assert!(trace.last.span() <= 64);
    }

    #[test]
    fn known_mass_does_not_drift() {
        // T -> T^2 doubles any round-off in the total mass every step.
        let policy = TruncationPolicy { horizon: 200, ..TruncationPolicy::with_mass_budget(1e-12) };
        let trace = iterate_with(&bernoulli(0.19), 200, policy, &[]).unwrap();
        let last = &trace.last;
        let total = last.known_mass() + last.remainder().mass;
        assert!((total - 1.0).abs() < 1e-13, "total {total}, zero {}", last.zero_mass());
        assert!(last.zero_mass() > 0.9, "zero {}", last.zero_mass());
    }

    #[test]
    fn csv_header() {
        let trace = iterate(&bernoulli(0.0), 2, 0.0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,mean_low,mean_high,zero_mass,support_size,dropped,F_low,F_high\n0,0.0,0.0,1.0,1,0.0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
