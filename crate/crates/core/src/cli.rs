//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the exit code together with the bytes meant for the output.
//!
//! Exit codes: 0 success, 2 validation error, 3 undecided or not established,
//! 1 I/O failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::criticality::{certify, pc_bisect, pc_theorem_a, Bracket, Certificate, CertifyOptions};
use crate::engine::{free_energy_with, iterate, FreeEnergy, FreeEnergyConfig, GenerationRecord, StopReason};
use crate::error::Error;
use crate::experiments::{conjecture_scan, dyadic_grid, fit_beta, fit_chi, max_leaf_lower_bound_check, FitConfig, SweepConfig, TailKind};
use crate::gf_bounds::{
    gf_trace, upper_bound_at, upper_bound_critical, upper_bound_power_law, verify_contraction, write_bounds_csv,
    UpperBound, UpperBoundConfig,
};
use crate::model::TailMeta;
use crate::tree_sim::{
    brother_law_chi_square, many_to_one_check, martingale_w_check, root_law_check, spine_subtree_moments, z_statistic,
    MonteCarlo, PathFunctional, ZConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_UNDECIDED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "drlab", version, about = "Derrida-Retaux recursion laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON document describing the model and run settings
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Write output here instead of stdout
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Per-generation means, zero mass and free-energy sandwich
    Iterate,
    /// Certified free-energy interval at each p
    FreeEnergy,
    /// Certified bracket for the critical p between run.p_lo and run.p_hi
    PcBisect,
    /// Generating-function trace at run.s, or scheduled upper bounds
    GfBound,
    /// Monte Carlo checks on trees and spines
    TreeCheck,
    /// Fit of log F against log p for an exponential tail
    FitBeta,
    /// Fit of log log(1/F) against log(1/p) for a critical tail
    FitChi,
    /// Exploratory near-critical scan
    ConjectureScan,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Iterate => "iterate",
            Command::FreeEnergy => "free-energy",
            Command::PcBisect => "pc-bisect",
            Command::GfBound => "gf-bound",
            Command::TreeCheck => "tree-check",
            Command::FitBeta => "fit-beta",
            Command::FitChi => "fit-chi",
            Command::ConjectureScan => "conjecture-scan",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

/// Rendered output plus whether the outcome was decided.
struct Report {
    body: Vec<u8>,
    decided: bool,
    note: Option<String>,
}

pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            return if code == EXIT_OK {
                Outcome { code, stdout: text.into_bytes(), stderr: String::new() }
            } else {
                Outcome { code, stdout: Vec::new(), stderr: text }
            };
        }
    };
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Outcome {
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be positive".into())),
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
        },
        None => dispatch(cli),
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_UNDECIDED };
            return Outcome { code, stdout: Vec::new(), stderr: format!("error: {e}\n") };
        }
    };
    let code = if report.decided { EXIT_OK } else { EXIT_UNDECIDED };
    let stderr = report.note.map(|n| format!("{n}\n")).unwrap_or_default();
    match &cli.out {
        Some(path) => match std::fs::write(path, &report.body) {
            Ok(()) => Outcome { code, stdout: Vec::new(), stderr },
            Err(e) => Outcome { code: EXIT_IO, stdout: Vec::new(), stderr: format!("error: {}: {e}\n", path.display()) },
        },
        None => Outcome { code, stdout: report.body, stderr },
    }
}

fn dispatch(cli: &Cli) -> crate::Result<Report> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config <file> is required".into()))?;
    let cfg = Config::from_path(path)?;
    let ctx = Ctx { cfg: &cfg, cli };
    match cli.command {
        Command::Iterate => ctx.iterate(),
        Command::FreeEnergy => ctx.free_energy(),
        Command::PcBisect => ctx.pc_bisect(),
        Command::GfBound => ctx.gf_bound(),
        Command::TreeCheck => ctx.tree_check(),
        Command::FitBeta => ctx.fit(false),
        Command::FitChi => ctx.fit(true),
        Command::ConjectureScan => ctx.conjecture_scan(),
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    subcommand: &'a str,
    seed: u64,
    result: &'a T,
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv output: {e}"))
}

fn csv_rows<R: Serialize>(rows: &[R]) -> crate::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv output: {e}")))
}

struct Ctx<'a> {
    cfg: &'a Config,
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn json<T: Serialize>(&self, value: &T) -> crate::Result<Vec<u8>> {
        let env = Envelope { schema_version: SCHEMA_VERSION, subcommand: self.cli.command.name(), seed: self.cli.seed, result: value };
        let mut out = serde_json::to_vec_pretty(&env).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    fn emit<T: Serialize, R: Serialize>(&self, value: &T, rows: &[R]) -> crate::Result<Vec<u8>> {
        match self.cli.format {
            Format::Json => self.json(value),
            Format::Csv => csv_rows(rows),
        }
    }

    fn mc(&self) -> MonteCarlo {
        MonteCarlo::new(self.cfg.run.trials, self.cli.seed)
    }

    fn iterate(&self) -> crate::Result<Report> {
        let spec = self.cfg.spec()?;
        let trace = iterate(&spec, self.cfg.run.n_max, self.cfg.run.budget)?;
        #[derive(Serialize)]
        struct Json<'a> {
            p: f64,
            m: f64,
            stop: StopReason,
            records: &'a [GenerationRecord],
            monotonicity_violations: Vec<usize>,
        }
        let body = match self.cli.format {
            Format::Csv => {
                let mut buf = Vec::new();
                trace.write_csv(&mut buf)?;
                buf
            }
            Format::Json => self.json(&Json {
                p: trace.p,
                m: trace.m,
                stop: trace.stop,
                records: &trace.records,
                monotonicity_violations: trace.monotonicity_violations(),
            })?,
        };
        let decided = trace.stop != StopReason::SupportCap;
        Ok(Report { body, decided, note: (!decided).then(|| "support cap reached before n_max".to_string()) })
    }

    fn free_energy(&self) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let fec = FreeEnergyConfig { support_cap: r.support_cap, mass_budget: r.budget, ..FreeEnergyConfig::absolute(r.tol, r.n_max) };
        let ps = self.cfg.p_values()?;
        let rows: Vec<FreeEnergy> = {
            use rayon::prelude::*;
            ps.par_iter().map(|&p| free_energy_with(&self.cfg.spec_at(p)?, &fec)).collect::<crate::Result<_>>()?
        };
        #[derive(Serialize)]
        struct Row {
            p: f64,
            #[serde(rename = "F_low")]
            low: f64,
            #[serde(rename = "F_high")]
            high: f64,
            n_used: usize,
            reached: bool,
        }
        let csv: Vec<Row> =
            rows.iter().map(|f| Row { p: f.p, low: f.low, high: f.high, n_used: f.n_used, reached: f.reached }).collect();
        let decided = rows.iter().all(|f| f.reached);
        Ok(Report {
            body: self.emit(&rows, &csv)?,
            decided,
            note: (!decided).then(|| "tolerance not reached at every p".to_string()),
        })
    }

    fn certify_options(&self) -> CertifyOptions {
        CertifyOptions {
            n_max: self.cfg.run.certify_n_max,
            support_cap: self.cfg.run.support_cap.min(CertifyOptions::default().support_cap),
            ..CertifyOptions::default()
        }
    }

    fn pc_bisect(&self) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let (lo, hi) = match (r.p_lo, r.p_hi) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::InvalidArgument("pc-bisect needs run.p_lo and run.p_hi".into())),
        };
        let opts = self.certify_options();
        let bracket = pc_bisect(|p| self.cfg.spec_at(p), lo, hi, r.tol, &opts)?;
        let theorem_a = match self.cfg.model.nu.is_deterministic() {
            true => self.cfg.y0().ok().and_then(|y0| pc_theorem_a(&y0, &self.cfg.model.nu).ok()),
            false => None,
        };
        #[derive(Serialize)]
        struct Json<'a> {
            bracket: &'a Bracket,
            theorem_a: Option<f64>,
        }
        #[derive(Serialize)]
        struct Row {
            p_lo: f64,
            p_hi: f64,
            width: f64,
            converged: bool,
            evaluations: usize,
            theorem_a: Option<f64>,
        }
        let row = Row {
            p_lo: bracket.lo,
            p_hi: bracket.hi,
            width: bracket.width,
            converged: bracket.converged,
            evaluations: bracket.evaluations,
            theorem_a,
        };
        Ok(Report {
            body: self.emit(&Json { bracket: &bracket, theorem_a }, &[row])?,
            decided: bracket.converged,
            note: (!bracket.converged).then(|| format!("bracket width {} above tolerance", bracket.width)),
        })
    }

    fn gf_bound(&self) -> crate::Result<Report> {
        match self.cfg.run.s {
            Some(s) => self.gf_trace_at(s),
            None => self.gf_scheduled(),
        }
    }

    fn gf_trace_at(&self, s: f64) -> crate::Result<Report> {
        let spec = self.cfg.spec()?;
        let r = &self.cfg.run;
        let trace = gf_trace(&spec, s, r.n_max)?;
        let contraction = if s < spec.m() { Some(verify_contraction(&trace, spec.nu(), r.delta0)?) } else { None };
        let certificate: Option<Certificate> = certify(&spec, &self.certify_options()).ok();
        let bound: Option<UpperBound> = upper_bound_at(&spec, s, r.n_max, &self.ub_config()).ok();
        #[derive(Serialize)]
        struct Row {
            n: usize,
            s: f64,
            #[serde(rename = "G")]
            g: f64,
            #[serde(rename = "G_deriv")]
            g_deriv: f64,
            a: f64,
            zero_mass: f64,
            contraction_rhs: Option<f64>,
        }
        let g0 = trace.points.first().map_or(0.0, |p| p.g_deriv);
        let rows: Vec<Row> = trace
            .points
            .iter()
            .map(|p| Row {
                n: p.n,
                s,
                g: p.g,
                g_deriv: p.g_deriv,
                a: p.a,
                zero_mass: p.zero,
                contraction_rhs: (s < spec.m()).then(|| (spec.m() / s).powi(p.n as i32) * g0),
            })
            .collect();
        #[derive(Serialize)]
        struct Json<'a> {
            trace: &'a crate::gf_bounds::GfTrace,
            contraction: &'a Option<crate::gf_bounds::ContractionReport>,
            upper_bound: &'a Option<UpperBound>,
            certificate: &'a Option<Certificate>,
        }
        let holds = contraction.as_ref().is_none_or(|c| c.holds());
        Ok(Report {
            body: self.emit(&Json { trace: &trace, contraction: &contraction, upper_bound: &bound, certificate: &certificate }, &rows)?,
            decided: holds,
            note: (!holds).then(|| "contraction inequality violated".to_string()),
        })
    }

    fn ub_config(&self) -> UpperBoundConfig {
        UpperBoundConfig { delta0: self.cfg.run.delta0, support_cap: self.cfg.run.support_cap, ..UpperBoundConfig::default() }
    }

    fn gf_scheduled(&self) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let ub = self.ub_config();
        let mut rows = Vec::new();
        for p in self.cfg.p_values()? {
            let spec = self.cfg.spec_at(p)?;
            let b = match spec.tail() {
                Some(TailMeta::Critical { .. }) => upper_bound_critical(&spec, r.c7, &ub)?,
                Some(TailMeta::Exponential { .. }) => upper_bound_power_law(&spec, r.c9, &ub)?,
                None => {
                    return Err(Error::InvalidArgument(
                        "gf-bound needs run.s or a model.family to pick the schedule".into(),
                    ))
                }
            };
            rows.push(b);
        }
        let body = match self.cli.format {
            Format::Json => self.json(&rows)?,
            Format::Csv => {
                let mut buf = Vec::new();
                write_bounds_csv(&rows, &mut buf)?;
                buf
            }
        };
        let decided = rows.iter().all(|b| b.established);
        Ok(Report { body, decided, note: (!decided).then(|| "upper bound not established at every p".to_string()) })
    }

    fn tree_check(&self) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let nu = &self.cfg.model.nu;
        let mc = self.mc();
        let n = r.n;
        let mut rows: Vec<CheckRow> = Vec::new();
        let chi = brother_law_chi_square(nu, &mc, 1e-3)?;
        rows.push(CheckRow::new("brother_law", "chi_square_p_value", chi.p_value, chi.alpha, 0.0, chi.pass));
        let mut functionals = vec![PathFunctional::One, PathFunctional::SubtreeLeaves { j: n.min(1) }];
        if n >= 2 {
            functionals.push(PathFunctional::NoBrotherLeaves { j: 1 });
        }
        let mut many = Vec::new();
        if n >= 1 {
            for g in functionals {
                let c = many_to_one_check(g, nu, n, &mc)?;
                let se = (c.lhs.std_err.powi(2) + c.rhs.std_err.powi(2)).sqrt();
                rows.push(CheckRow::new("many_to_one", &format!("{g:?}"), c.lhs.mean, c.rhs.mean, se, c.agree));
                many.push(c);
            }
        }
        let spine = if n >= 1 { Some(spine_subtree_moments(nu, n, &mc)?) } else { None };
        if let Some(s) = &spine {
            for row in &s.rows {
                rows.push(CheckRow::new(
                    "spine_first_moment",
                    &format!("i={}", row.i),
                    row.first.mean,
                    row.first_closed_form,
                    row.first.std_err,
                    row.first_holds,
                ));
            }
        }
        let mart = martingale_w_check(nu, n, &mc)?;
        for (j, e) in mart.mean.iter().enumerate() {
            rows.push(CheckRow::new("martingale_mean", &format!("j={j}"), e.mean, 1.0, e.std_err, e.within(1.0, 3.0)));
        }
        let with_law = self.cfg.model.y0.is_some() || self.cfg.model.family.is_some();
        let (mut root, mut z, mut leaf) = (None, Vec::new(), None);
        if with_law {
            let spec = self.cfg.spec()?;
            let rl = root_law_check(&spec, n, &mc)?;
            rows.push(CheckRow::new("root_law", "total_variation", rl.total_variation, rl.tolerance, 0.0, rl.holds));
            root = Some(rl);
            for &b in r.b_grid.iter().filter(|&&b| b > 0.0) {
                let zc = ZConfig { lambda1: r.lambda1, lambda2: r.lambda2, b, n };
                let rep = z_statistic(&spec, &zc, &mc)?;
                rows.push(CheckRow::new("z_statistic", &format!("b={b}"), rep.p_z.mean, rep.p_exact, rep.p_z.std_err, rep.holds));
                z.push(rep);
            }
            let ml = max_leaf_lower_bound_check(&spec, n, &r.b_grid, &mc)?;
            for row in &ml.rows {
                rows.push(CheckRow::new("max_leaf", &format!("b={}", row.b), row.estimate, row.exact, row.std_err, row.holds));
            }
            leaf = Some(ml);
        }
        #[derive(Serialize)]
        struct Json<'a> {
            trials: usize,
            n: usize,
            brother_law: &'a crate::tree_sim::ChiSquareReport,
            many_to_one: &'a [crate::tree_sim::ManyToOne],
            spine_moments: &'a Option<crate::tree_sim::SpineMoments>,
            martingale: &'a crate::tree_sim::MartingaleReport,
            root_law: &'a Option<crate::tree_sim::RootLawCheck>,
            z_statistic: &'a [crate::tree_sim::ZReport],
            max_leaf: &'a Option<crate::experiments::MaxLeafReport>,
            all_hold: bool,
        }
        let all_hold = rows.iter().all(|r| r.holds);
        let body = self.emit(
            &Json {
                trials: mc.trials,
                n,
                brother_law: &chi,
                many_to_one: &many,
                spine_moments: &spine,
                martingale: &mart,
                root_law: &root,
                z_statistic: &z,
                max_leaf: &leaf,
                all_hold,
            },
            &rows,
        )?;
        Ok(Report { body, decided: all_hold, note: (!all_hold).then(|| "some tree checks failed".to_string()) })
    }

    fn fit(&self, critical: bool) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let family = self
            .cfg
            .model
            .family
            .ok_or_else(|| Error::InvalidArgument("fits need model.family".into()))?;
        if let Some(base) = family.m {
            if (base - self.cfg.model.nu.mean()).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "fits use the offspring mean {} as tail base, config gives m = {base}",
                    self.cfg.model.nu.mean()
                )));
            }
        }
        let grid = match &self.cfg.model.p_grid {
            Some(g) => g.clone(),
            None => dyadic_grid(4, 10),
        };
        let fc = FitConfig {
            sweep: SweepConfig { rel_tol: r.rel_tol, n_cap: r.n_max, mass_budget: r.budget, support_cap: r.support_cap },
            tolerance: r.fit_tolerance,
            c7: r.c7,
            k_max: family.k_max,
            ..FitConfig::default()
        };
        let nu = &self.cfg.model.nu;
        let report = match (critical, family.kind) {
            (false, TailKind::Exponential { theta }) => fit_beta(theta, nu, &grid, &fc)?,
            (true, TailKind::Critical { alpha }) => fit_chi(alpha, nu, &grid, &fc)?,
            (false, _) => return Err(Error::InvalidArgument("fit-beta needs an exponential family".into())),
            (true, _) => return Err(Error::InvalidArgument("fit-chi needs a critical family".into())),
        };
        #[derive(Serialize)]
        struct Row {
            p: f64,
            #[serde(rename = "F_low")]
            low: f64,
            #[serde(rename = "F_high")]
            high: f64,
            #[serde(rename = "F_hat")]
            hat: f64,
            n_used: usize,
            admissible: bool,
            #[serde(rename = "F_upper_gf")]
            gf: Option<f64>,
        }
        let rows: Vec<Row> = report
            .points
            .iter()
            .map(|q| Row {
                p: q.p,
                low: q.f_low,
                high: q.f_high,
                hat: q.f_hat,
                n_used: q.n_used,
                admissible: q.admissible,
                gf: q.gf_upper.as_ref().filter(|b| b.established).map(|b| b.f_upper),
            })
            .collect();
        let note = format!(
            "{}: slope {:.4} target {:.4} tolerance {} {}",
            report.exponent,
            report.fit.slope,
            report.target,
            report.tolerance,
            if report.pass { "pass" } else { "fail" }
        );
        Ok(Report { body: self.emit(&report, &rows)?, decided: report.pass, note: Some(note) })
    }

    fn conjecture_scan(&self) -> crate::Result<Report> {
        let r = &self.cfg.run;
        let grid = self
            .cfg
            .model
            .p_grid
            .clone()
            .ok_or_else(|| Error::InvalidArgument("conjecture-scan needs model.p_grid".into()))?;
        let sweep = SweepConfig { rel_tol: r.rel_tol, n_cap: r.n_max, mass_budget: r.budget, support_cap: r.support_cap };
        let report = conjecture_scan(&self.cfg.y0()?, &self.cfg.model.nu, &grid, &sweep)?;
        #[derive(Serialize)]
        struct Row {
            p: f64,
            #[serde(rename = "F_low")]
            low: f64,
            #[serde(rename = "F_high")]
            high: f64,
            x: f64,
            y: Option<f64>,
            admissible: bool,
        }
        let rows: Vec<Row> = report
            .points
            .iter()
            .map(|q| Row {
                p: q.p,
                low: q.f_low,
                high: q.f_high,
                x: (q.p - report.p_c).powf(-0.5),
                y: q.admissible.then(|| (1.0 / q.f_hat).ln()),
                admissible: q.admissible,
            })
            .collect();
        Ok(Report {
            body: self.emit(&report, &rows)?,
            decided: true,
            note: Some("exploratory scan; not a pass/fail check".to_string()),
        })
    }
}

#[derive(Debug, Serialize)]
struct CheckRow {
    check: String,
    label: String,
    lhs: f64,
    rhs: f64,
    std_err: f64,
    holds: bool,
}

impl CheckRow {
    fn new(check: &str, label: &str, lhs: f64, rhs: f64, std_err: f64, holds: bool) -> Self {
        Self { check: check.into(), label: label.into(), lhs, rhs, std_err, holds }
    }
}

/// Writes an outcome to the process streams and returns its exit code.
pub fn finish(outcome: Outcome) -> i32 {
    let mut stdout = std::io::stdout().lock();
    if stdout.write_all(&outcome.stdout).and_then(|_| stdout.flush()).is_err() {
        return EXIT_IO;
    }
    if !outcome.stderr.is_empty() {
        eprint!("{}", outcome.stderr);
    }
    outcome.code
}
