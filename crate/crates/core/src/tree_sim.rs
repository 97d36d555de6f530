//! Monte Carlo on reversed Galton–Watson trees: the hierarchical
//! representation of the recursion, the size-biased spine, many-to-one
//! checks, the `Z` statistic and the normalized population martingale.
//!
//! Sampling is split into fixed-size chunks; chunk `c` draws from a ChaCha8
//! generator seeded with the run seed on stream `c`, and chunk results are
//! combined in chunk order, so output does not depend on the thread count.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::engine::iterate;
use crate::error::{Error, Result};
use crate::model::{make_initial, ModelSpec};
use crate::offspring::OffspringLaw;
use crate::pmf::LatticePmf;

/// Trials per independent random stream.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarlo {
    pub trials: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self { trials: 100_000, seed: 0 }
    }
}

impl MonteCarlo {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self { trials, seed }
    }

    fn check(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 trials, got {}", self.trials)));
        }
        Ok(())
    }

    /// Runs `f(rng, trials_in_chunk)` per chunk and returns results in chunk order.
    fn chunks<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
    {
        let n_chunks = self.trials.div_ceil(CHUNK);
        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream(self.seed, c as u64);
                let len = CHUNK.min(self.trials - c * CHUNK);
                f(&mut rng, len)
            })
            .collect()
    }
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Running sums for a mean and its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn var(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m) * self.n / (self.n - 1.0)).max(0.0)
    }

    fn std_err(&self) -> f64 {
        (self.var() / self.n).sqrt()
    }

    fn estimate(&self) -> Estimate {
        Estimate { mean: self.mean(), std_err: self.std_err() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.std_err + 1e-12 * target.abs().max(1.0)
    }
}

fn merge_all<'a, I: IntoIterator<Item = &'a Moments>>(parts: I) -> Moments {
    let mut acc = Moments::default();
    for p in parts {
        acc.merge(p);
    }
    acc
}

/// Sampler for `nu`.
#[derive(Debug, Clone)]
struct NuSampler {
    values: Vec<u32>,
    index: WeightedIndex<f64>,
}

impl NuSampler {
    fn new(nu: &OffspringLaw) -> Self {
        let (values, w): (Vec<u32>, Vec<f64>) = nu.probs().iter().cloned().unzip();
        Self { values, index: WeightedIndex::new(w).expect("offspring law has positive mass") }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        self.values[self.index.sample(rng)]
    }
}

/// Sampler for the initial law on lattice indices.
#[derive(Debug, Clone)]
pub struct X0Sampler {
    indices: Vec<usize>,
    index: WeightedIndex<f64>,
    unit: usize,
}

impl X0Sampler {
    /// Requires the law to be exactly known and its lattice step to divide 1.
    pub fn new(law: &LatticePmf) -> Result<Self> {
        if law.dropped() > 0.0 {
            return Err(Error::InvalidArgument("initial law must be exact to be sampled".into()));
        }
        let unit = law.step().steps_per_unit().ok_or_else(|| Error::StepDoesNotDivideOne(format!("step {}", law.step().as_f64())))?;
        let (indices, w): (Vec<usize>, Vec<f64>) = law.iter().filter(|x| x.1 > 0.0).unzip();
        let index = WeightedIndex::new(w).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Ok(Self { indices, index, unit })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        Self::new(&make_initial(spec))
    }

    /// Lattice indices per unit of value.
    pub fn unit(&self) -> usize {
        self.unit
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.indices[self.index.sample(rng)]
    }
}

/// Reversed Galton–Watson tree of depth `n`, stored by generation. The root
/// is the single vertex of generation `n`; the parents of vertex `i` in
/// generation `g >= 1` are vertices `first[g][i]..first[g][i] + count[g][i]`
/// of generation `g - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GwTree {
    n: usize,
    count: Vec<Vec<u32>>,
    first: Vec<Vec<usize>>,
    child: Vec<Vec<usize>>,
}

impl GwTree {
    fn from_counts(n: usize, counts_by_gen: Vec<Vec<u32>>) -> Self {
        // counts_by_gen[g] for g = 1..=n (index 0 unused)
        let mut first = vec![Vec::new(); n + 1];
        let mut child = vec![Vec::new(); n + 1];
        for g in (1..=n).rev() {
            let mut offset = 0;
            for (i, &c) in counts_by_gen[g].iter().enumerate() {
                first[g].push(offset);
                for _ in 0..c {
                    child[g - 1].push(i);
                }
                offset += c as usize;
            }
        }
        Self { n, count: counts_by_gen, first, child }
    }

    pub fn depth(&self) -> usize {
        self.n
    }

    pub fn generation_size(&self, g: usize) -> usize {
        if g == self.n {
            1
        } else {
            self.child[g].len()
        }
    }

    /// `#T_0`, the number of initial-generation vertices.
    pub fn leaves(&self) -> usize {
        self.generation_size(0)
    }

    pub fn parents(&self, g: usize, i: usize) -> std::ops::Range<usize> {
        let f = self.first[g][i];
        f..f + self.count[g][i] as usize
    }

    /// The unique child in generation `g + 1`.
    pub fn child(&self, g: usize, i: usize) -> usize {
        self.child[g][i]
    }

    /// `#T_0(v)` for every vertex, by generation.
    pub fn subtree_leaves(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![1usize; self.leaves()]];
        for g in 1..=self.n {
            let below = &out[g - 1];
            let row = (0..self.generation_size(g)).map(|i| self.parents(g, i).map(|j| below[j]).sum()).collect();
            out.push(row);
        }
        out
    }

    /// Per leaf, the profile `Lambda(u_j)` for `0 <= j < n`.
    pub fn leaf_profiles(&self) -> Vec<PathProfile> {
        let sizes = self.subtree_leaves();
        (0..self.leaves())
            .map(|u| {
                let mut lambda = Vec::with_capacity(self.n);
                let mut v = u;
                for g in 0..self.n {
                    let c = self.child(g, v);
                    lambda.push(sizes[g + 1][c] - sizes[g][v]);
                    v = c;
                }
                PathProfile { lambda }
            })
            .collect()
    }
}

pub fn sample_gw_tree_with<R: Rng>(nu: &OffspringLaw, n: usize, rng: &mut R) -> GwTree {
    let sampler = NuSampler::new(nu);
    let mut counts = vec![Vec::new(); n + 1];
    let mut width = 1usize;
    for g in (1..=n).rev() {
        let row: Vec<u32> = (0..width).map(|_| sampler.sample(rng)).collect();
        width = row.iter().map(|&c| c as usize).sum();
        counts[g] = row;
    }
    GwTree::from_counts(n, counts)
}

pub fn sample_gw_tree(nu: &OffspringLaw, n: usize, seed: u64) -> GwTree {
    sample_gw_tree_with(nu, n, &mut stream(seed, 0))
}

/// Every tree of depth `n` with its probability.
pub fn enumerate_trees(nu: &OffspringLaw, n: usize, cap: usize) -> Result<Vec<(f64, GwTree)>> {
    let mut partial: Vec<(f64, Vec<Vec<u32>>)> = vec![(1.0, vec![Vec::new(); n + 1])];
    let mut widths = vec![1usize];
    for g in (1..=n).rev() {
        let mut next = Vec::new();
        let mut next_widths = Vec::new();
        for ((prob, counts), &width) in partial.into_iter().zip(&widths) {
            let mut combos: Vec<(f64, Vec<u32>)> = vec![(prob, Vec::with_capacity(width))];
            for _ in 0..width {
                let mut grown = Vec::with_capacity(combos.len() * nu.probs().len());
                for (q, row) in &combos {
                    for &(k, pk) in nu.probs() {
                        let mut r = row.clone();
                        r.push(k);
                        grown.push((q * pk, r));
                    }
                }
                combos = grown;
                if combos.len() > cap {
                    return Err(Error::CapExceeded(format!("more than {cap} trees of depth {n}")));
                }
            }
            for (q, row) in combos {
                let w = row.iter().map(|&c| c as usize).sum();
                let mut c = counts.clone();
                c[g] = row;
                next.push((q, c));
                next_widths.push(w);
            }
            if next.len() > cap {
                return Err(Error::CapExceeded(format!("more than {cap} trees of depth {n}")));
            }
        }
        partial = next;
        widths = next_widths;
    }
    Ok(partial.into_iter().map(|(q, c)| (q, GwTree::from_counts(n, c))).collect())
}

/// `X(u)` for every vertex, by generation, in lattice indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeValues {
    pub values: Vec<Vec<usize>>,
}

impl TreeValues {
    pub fn root(&self) -> usize {
        *self.values.last().and_then(|v| v.first()).expect("tree has a root")
    }
}

/// Applies `X(u) = (X(u^(1)) + ... + X(u^(nu_u)) - 1)^+` from given leaf values.
pub fn evaluate_with_leaves(tree: &GwTree, leaves: Vec<usize>, unit: usize) -> Result<TreeValues> {
    if leaves.len() != tree.leaves() {
        return Err(Error::InvalidArgument(format!(
            "{} leaf values for {} leaves",
            leaves.len(),
            tree.leaves()
        )));
    }
    let mut values = vec![leaves];
    for g in 1..=tree.depth() {
        let below = &values[g - 1];
        let row = (0..tree.generation_size(g))
            .map(|i| tree.parents(g, i).map(|j| below[j]).sum::<usize>().saturating_sub(unit))
            .collect();
        values.push(row);
    }
    Ok(TreeValues { values })
}

pub fn evaluate_recursion_on_tree<R: Rng>(tree: &GwTree, x0: &X0Sampler, rng: &mut R) -> TreeValues {
    let leaves = (0..tree.leaves()).map(|_| x0.sample(rng)).collect();
    evaluate_with_leaves(tree, leaves, x0.unit()).expect("leaf count matches")
}

/// Empirical law of `X(e_n)` against the exact law of `X_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootLawCheck {
    pub n: usize,
    pub trials: usize,
    pub total_variation: f64,
    /// `sqrt(support / trials)`, the scale of the total variation of an
    /// empirical law with that many atoms.
    pub tolerance: f64,
    pub holds: bool,
}

pub fn root_law_check(spec: &ModelSpec, n: usize, mc: &MonteCarlo) -> Result<RootLawCheck> {
    mc.check()?;
    let exact = iterate(spec, n, 0.0)?.last;
    let x0 = X0Sampler::from_spec(spec)?;
    let parts = mc.chunks(|rng, len| {
        let mut hist: Vec<u64> = Vec::new();
        for _ in 0..len {
            let tree = sample_gw_tree_with(spec.nu(), n, rng);
            let r = evaluate_recursion_on_tree(&tree, &x0, rng).root();
            if hist.len() <= r {
                hist.resize(r + 1, 0);
            }
            hist[r] += 1;
        }
        hist
    });
    let mut hist: Vec<u64> = Vec::new();
    for h in parts {
        if hist.len() < h.len() {
            hist.resize(h.len(), 0);
        }
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let top = hist.len().max(exact.max_index().map_or(0, |k| k + 1));
    let t = mc.trials as f64;
    let tv = 0.5
        * (0..top)
            .map(|k| (hist.get(k).copied().unwrap_or(0) as f64 / t - exact.mass(k)).abs())
            .sum::<f64>();
    let support = exact.support_size().max(1) as f64;
    let tolerance = (support / t).sqrt();
    Ok(RootLawCheck { n, trials: mc.trials, total_variation: tv, tolerance, holds: tv <= tolerance })
}

/// Brother structure along a path from a leaf: `lambda[j] = Lambda(u_j)` for
/// `0 <= j < n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathProfile {
    pub lambda: Vec<usize>,
}

impl PathProfile {
    /// `#T_0(u_j) = 1 + sum_{i<j} Lambda(u_i)`.
    pub fn subtree_leaves(&self, j: usize) -> usize {
        1 + self.lambda[..j].iter().sum::<usize>()
    }
}

/// Size-biased tree seen from its spine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpineSample {
    pub n: usize,
    /// `#bro(e_i)`, `0 <= i < n`.
    pub brothers: Vec<usize>,
    /// `#T_0(r)` for each brother `r` of `e_i`.
    pub brother_leaves: Vec<Vec<usize>>,
}

impl SpineSample {
    pub fn lambda(&self, i: usize) -> usize {
        self.brother_leaves[i].iter().sum()
    }

    pub fn profile(&self) -> PathProfile {
        PathProfile { lambda: (0..self.n).map(|i| self.lambda(i)).collect() }
    }

    pub fn subtree_leaves(&self, i: usize) -> usize {
        1 + (0..i).map(|j| self.lambda(j)).sum::<usize>()
    }
}

/// Sampler for the size-biased law `k P(nu = k) / m`.
#[derive(Debug, Clone)]
struct SizeBiased {
    values: Vec<u32>,
    index: WeightedIndex<f64>,
}

impl SizeBiased {
    fn new(nu: &OffspringLaw) -> Self {
        let (values, w): (Vec<u32>, Vec<f64>) = nu.size_biased().into_iter().unzip();
        Self { values, index: WeightedIndex::new(w).expect("size-biased law has positive mass") }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        self.values[self.index.sample(rng)]
    }
}

/// Population of generation `depth` of a Galton–Watson process started from one individual.
fn gw_population<R: Rng>(nu: &NuSampler, depth: usize, rng: &mut R) -> usize {
    let mut z = 1usize;
    for _ in 0..depth {
        z = (0..z).map(|_| nu.sample(rng) as usize).sum();
    }
    z
}

fn sample_spine_with<R: Rng>(nu: &NuSampler, sb: &SizeBiased, n: usize, rng: &mut R) -> SpineSample {
    let mut brothers = Vec::with_capacity(n);
    let mut brother_leaves = Vec::with_capacity(n);
    for i in 0..n {
        let b = sb.sample(rng) as usize - 1;
        brothers.push(b);
        brother_leaves.push((0..b).map(|_| gw_population(nu, i, rng)).collect());
    }
    SpineSample { n, brothers, brother_leaves }
}

pub fn sample_spine(nu: &OffspringLaw, n: usize, seed: u64) -> Result<SpineSample> {
    if n < 1 {
        return Err(Error::InvalidArgument("spine needs n >= 1".into()));
    }
    Ok(sample_spine_with(&NuSampler::new(nu), &SizeBiased::new(nu), n, &mut stream(seed, 0)))
}

/// Path functionals for many-to-one checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathFunctional {
    One,
    /// `#T_0(u_j)`.
    SubtreeLeaves { j: usize },
    /// `1{Lambda(u_j) = 0}`.
    NoBrotherLeaves { j: usize },
    /// `Lambda(u_j)^2`.
    LambdaSquared { j: usize },
}

impl PathFunctional {
    pub fn eval(&self, p: &PathProfile) -> f64 {
        match *self {
            PathFunctional::One => 1.0,
            PathFunctional::SubtreeLeaves { j } => p.subtree_leaves(j) as f64,
            PathFunctional::NoBrotherLeaves { j } => (p.lambda[j] == 0) as u8 as f64,
            PathFunctional::LambdaSquared { j } => (p.lambda[j] as f64).powi(2),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let ok = match *self {
            PathFunctional::One => true,
            PathFunctional::SubtreeLeaves { j } => j <= n,
            PathFunctional::NoBrotherLeaves { j } | PathFunctional::LambdaSquared { j } => j < n,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{self:?} is not defined for depth {n}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManyToOne {
    pub functional: PathFunctional,
    pub n: usize,
    /// `E(sum over leaves of g)`.
    pub lhs: Estimate,
    /// `m^n E_Q(g(spine))`.
    pub rhs: Estimate,
    /// Exact left side by enumeration, when the tree count is small.
    pub lhs_exact: Option<f64>,
    /// Exact right side from the spinal decomposition, when small.
    pub rhs_exact: Option<f64>,
    pub agree: bool,
}

/// Largest number of enumerated trees for the exact sides.
pub const ENUMERATION_CAP: usize = 1 << 20;

pub fn many_to_one_check(g: PathFunctional, nu: &OffspringLaw, n: usize, mc: &MonteCarlo) -> Result<ManyToOne> {
    mc.check()?;
    g.check(n)?;
    let m = nu.mean();
    let scale = m.powi(n as i32);
    let nus = NuSampler::new(nu);
    let sb = SizeBiased::new(nu);
    let lhs_parts = mc.chunks(|rng, len| {
        let mut acc = Moments::default();
        for _ in 0..len {
            let tree = sample_gw_tree_with(nu, n, rng);
            acc.push(tree.leaf_profiles().iter().map(|p| g.eval(p)).sum());
        }
        acc
    });
    // spine streams are offset so the two sides are independent
    let spine_mc = MonteCarlo { trials: mc.trials, seed: mc.seed ^ 0x5eed_5eed_5eed_5eed };
    let rhs_parts = spine_mc.chunks(|rng, len| {
        let mut acc = Moments::default();
        for _ in 0..len {
            acc.push(scale * g.eval(&sample_spine_with(&nus, &sb, n, rng).profile()));
        }
        acc
    });
    let lhs = merge_all(&lhs_parts).estimate();
    let rhs = merge_all(&rhs_parts).estimate();
    let (lhs_exact, rhs_exact) = if n <= 3 {
        (many_to_one_lhs_exact(g, nu, n).ok(), many_to_one_rhs_exact(g, nu, n).ok())
    } else {
        (None, None)
    };
    let combined = (lhs.std_err.powi(2) + rhs.std_err.powi(2)).sqrt();
    let mut agree = (lhs.mean - rhs.mean).abs() <= 3.0 * combined + 1e-12 * scale;
    if let (Some(a), Some(b)) = (lhs_exact, rhs_exact) {
        agree &= (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    }
    Ok(ManyToOne { functional: g, n, lhs, rhs, lhs_exact, rhs_exact, agree })
}

/// `E(sum over leaves of g)` by enumerating all trees.
pub fn many_to_one_lhs_exact(g: PathFunctional, nu: &OffspringLaw, n: usize) -> Result<f64> {
    g.check(n)?;
    Ok(enumerate_trees(nu, n, ENUMERATION_CAP)?
        .iter()
        .map(|(q, t)| q * t.leaf_profiles().iter().map(|p| g.eval(p)).sum::<f64>())
        .sum())
}

/// Law of the population at generation `depth` from one individual.
pub fn gw_population_law(nu: &OffspringLaw, depth: usize) -> Vec<f64> {
    let mut law = vec![0.0, 1.0];
    for _ in 0..depth {
        // Z_{j+1} is the sum of nu over one individual of Z_j ... compose
        // from the top: Z_{j+1} = sum over Z_1 of copies of Z_j.
        let mut next = vec![0.0];
        let mut power = vec![1.0];
        for k in 1..=nu.max_k() {
            power = convolve(&power, &law);
            let pk = nu.probs().iter().find(|x| x.0 == k).map_or(0.0, |x| x.1);
            if pk > 0.0 {
                if next.len() < power.len() {
                    next.resize(power.len(), 0.0);
                }
                for (a, b) in next.iter_mut().zip(&power) {
                    *a += pk * b;
                }
            }
        }
        law = next;
    }
    law
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `m^n E_Q(g)` from the spinal decomposition: `Lambda(e_i)` independent,
/// each a sum of `k - 1` generation-`i` populations with `k` size-biased.
pub fn many_to_one_rhs_exact(g: PathFunctional, nu: &OffspringLaw, n: usize) -> Result<f64> {
    g.check(n)?;
    let sb = nu.size_biased();
    let laws: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let pop = gw_population_law(nu, i);
            let mut lam = vec![0.0];
            let mut power = vec![1.0];
            for k in 1..=nu.max_k() {
                let q = sb.iter().find(|x| x.0 == k).map_or(0.0, |x| x.1);
                if q > 0.0 {
                    if lam.len() < power.len() {
                        lam.resize(power.len(), 0.0);
                    }
                    for (a, b) in lam.iter_mut().zip(&power) {
                        *a += q * b;
                    }
                }
                power = convolve(&power, &pop);
            }
            lam
        })
        .collect();
    let mut states: Vec<(f64, Vec<usize>)> = vec![(1.0, Vec::new())];
    for law in &laws {
        let mut next = Vec::new();
        for (q, prefix) in &states {
            for (v, &r) in law.iter().enumerate() {
                if r > 0.0 {
                    let mut p = prefix.clone();
                    p.push(v);
                    next.push((q * r, p));
                }
            }
        }
        if next.len() > ENUMERATION_CAP {
            return Err(Error::CapExceeded("spine profile enumeration".into()));
        }
        states = next;
    }
    let scale = nu.mean().powi(n as i32);
    Ok(scale * states.iter().map(|(q, lambda)| q * g.eval(&PathProfile { lambda: lambda.clone() })).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtreeMoments {
    pub i: usize,
    pub first: Estimate,
    pub second: Estimate,
    /// `c10 sum_{j<i} m^j + 1`.
    pub first_closed_form: f64,
    /// `E_Q((#T_0(e_i))^2) / m^(2i)`.
    pub second_scaled: f64,
    pub first_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpineMoments {
    pub n: usize,
    pub c10: f64,
    pub rows: Vec<SubtreeMoments>,
    /// Fitted `c12`: the largest scaled second moment.
    pub c12: f64,
    pub holds: bool,
}

/// `c10 = (1/m) sum k(k-1) P(nu = k)`.
pub fn c10(nu: &OffspringLaw) -> f64 {
    nu.probs().iter().map(|&(k, p)| k as f64 * (k as f64 - 1.0) * p).sum::<f64>() / nu.mean()
}

pub fn spine_subtree_moments(nu: &OffspringLaw, n: usize, mc: &MonteCarlo) -> Result<SpineMoments> {
    mc.check()?;
    if n < 1 {
        return Err(Error::InvalidArgument("spine needs n >= 1".into()));
    }
    let nus = NuSampler::new(nu);
    let sb = SizeBiased::new(nu);
    let parts = mc.chunks(|rng, len| {
        let mut first = vec![Moments::default(); n + 1];
        let mut second = vec![Moments::default(); n + 1];
        for _ in 0..len {
            let s = sample_spine_with(&nus, &sb, n, rng);
            for i in 0..=n {
                let t = s.subtree_leaves(i) as f64;
                first[i].push(t);
                second[i].push(t * t);
            }
        }
        (first, second)
    });
    let m = nu.mean();
    let c = c10(nu);
    let rows: Vec<SubtreeMoments> = (0..=n)
        .map(|i| {
            let first = merge_all(parts.iter().map(|p| &p.0[i])).estimate();
            let second = merge_all(parts.iter().map(|p| &p.1[i])).estimate();
            let closed = c * (0..i).map(|j| m.powi(j as i32)).sum::<f64>() + 1.0;
            SubtreeMoments {
                i,
                first,
                second,
                first_closed_form: closed,
                second_scaled: second.mean / m.powi(2 * i as i32),
                first_holds: first.within(closed, 3.0),
            }
        })
        .collect();
    let c12 = rows.iter().map(|r| r.second_scaled).fold(0.0, f64::max);
    let holds = rows.iter().all(|r| r.first_holds);
    Ok(SpineMoments { n, c10: c, rows, c12, holds })
}

/// Pearson test of sampled `#bro(e_0)` against `Q(#bro = k - 1) = k P(nu = k)/m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareReport {
    pub samples: usize,
    /// `(brothers, observed, expected)`.
    pub cells: Vec<(usize, u64, f64)>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub pass: bool,
}

pub fn brother_law_chi_square(nu: &OffspringLaw, mc: &MonteCarlo, alpha: f64) -> Result<ChiSquareReport> {
    mc.check()?;
    let sb = SizeBiased::new(nu);
    let law = nu.size_biased();
    let max = nu.max_k() as usize;
    let parts = mc.chunks(|rng, len| {
        let mut h = vec![0u64; max];
        for _ in 0..len {
            h[sb.sample(rng) as usize - 1] += 1;
        }
        h
    });
    let mut hist = vec![0u64; max];
    for h in parts {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let t = mc.trials as f64;
    let cells: Vec<(usize, u64, f64)> = law.iter().map(|&(k, q)| (k as usize - 1, hist[k as usize - 1], q * t)).collect();
    let statistic: f64 = cells.iter().map(|&(_, o, e)| (o as f64 - e).powi(2) / e).sum();
    let dof = cells.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let d = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        1.0 - d.cdf(statistic)
    };
    Ok(ChiSquareReport { samples: mc.trials, cells, statistic, dof, p_value, alpha, pass: p_value > alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Threshold `b`, in value units.
    pub b: f64,
    pub n: usize,
}

impl Default for ZConfig {
    fn default() -> Self {
        Self { lambda1: 1.0 / 3.0, lambda2: 2.0 / 3.0, b: 1.0, n: 8 }
    }
}

impl ZConfig {
    fn check(&self) -> Result<()> {
        if !(0.0 < self.lambda1 && self.lambda1 < self.lambda2 && self.lambda2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < lambda1 < lambda2 < 1, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.b > 0.0) {
            return Err(Error::InvalidArgument(format!("b = {} must be positive", self.b)));
        }
        Ok(())
    }
}

/// `Z`: leaves `u` with `X(u)` in `[floor(l1 n), floor(l2 n)]` and
/// `max_{1 <= j <= floor(l1 n)} M(u_j) >= b + n - X(u)`.
pub fn z_count(tree: &GwTree, values: &TreeValues, cfg: &ZConfig, unit: usize) -> usize {
    let n = tree.depth();
    let u = unit as f64;
    let j1 = (cfg.lambda1 * n as f64).floor() as usize;
    let lo = (cfg.lambda1 * n as f64).floor() * u;
    let hi = (cfg.lambda2 * n as f64).floor() * u;
    if j1 == 0 {
        return 0;
    }
    // max leaf value below each vertex
    let mut top: Vec<Vec<usize>> = vec![values.values[0].clone()];
    for g in 1..=j1 {
        let below = &top[g - 1];
        top.push((0..tree.generation_size(g)).map(|i| tree.parents(g, i).map(|k| below[k]).max().unwrap_or(0)).collect());
    }
    // M(v) for generations 1..=j1, then the running max from generation j1 down to 1
    let mut best: Vec<Vec<f64>> = vec![Vec::new(); j1 + 1];
    for g in (1..=j1).rev() {
        best[g] = (0..tree.generation_size(g))
            .map(|i| {
                let c = tree.child(g, i);
                let own = tree
                    .parents(g + 1, c)
                    .filter(|&r| r != i)
                    .map(|r| (top[g][r] as f64 - g as f64 * u).max(0.0))
                    .fold(0.0, f64::max);
                if g < j1 {
                    own.max(best[g + 1][c])
                } else {
                    own
                }
            })
            .collect();
    }
    (0..tree.leaves())
        .filter(|&leaf| {
            let x = values.values[0][leaf] as f64;
            x >= lo && x <= hi && best[1][tree.child(0, leaf)] >= cfg.b * u + n as f64 * u - x
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZReport {
    pub n: usize,
    pub b: f64,
    pub trials: usize,
    /// Monte Carlo `P(Z >= 1)`.
    pub p_z: Estimate,
    /// `P(X_n >= b)` from the exact law (plus any mass lost to underflow).
    pub p_exact: f64,
    /// Realizations with `Z >= 1` but `X(e_n) < b`; the event inclusion makes this 0.
    pub pathwise_violations: usize,
    pub holds: bool,
}

pub fn z_statistic(spec: &ModelSpec, cfg: &ZConfig, mc: &MonteCarlo) -> Result<ZReport> {
    cfg.check()?;
    mc.check()?;
    let law = iterate(spec, cfg.n, 0.0)?.last;
    // only underflow in the far tail may be lost
    if law.dropped() > 1e-12 {
        return Err(Error::CapExceeded(format!("exact law of X_{} not reachable", cfg.n)));
    }
    let p_exact = law.tail(cfg.b) + law.dropped();
    let x0 = X0Sampler::from_spec(spec)?;
    let unit = x0.unit();
    let b_idx = cfg.b * unit as f64;
    let parts = mc.chunks(|rng, len| {
        let mut acc = Moments::default();
        let mut bad = 0usize;
        for _ in 0..len {
            let tree = sample_gw_tree_with(spec.nu(), cfg.n, rng);
            let vals = evaluate_recursion_on_tree(&tree, &x0, rng);
            let hit = z_count(&tree, &vals, cfg, unit) >= 1;
            if hit && (vals.root() as f64) < b_idx - 1e-9 {
                bad += 1;
            }
            acc.push(hit as u8 as f64);
        }
        (acc, bad)
    });
    let p_z = merge_all(parts.iter().map(|p| &p.0)).estimate();
    let pathwise_violations = parts.iter().map(|p| p.1).sum();
    let holds = pathwise_violations == 0 && p_z.mean <= p_exact + 3.0 * p_z.std_err + 1e-12;
    Ok(ZReport { n: cfg.n, b: cfg.b, trials: mc.trials, p_z, p_exact, pathwise_violations, holds })
}

/// `W_j = m^-j Z_j` for a Galton–Watson process from one individual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub depth: usize,
    pub trials: usize,
    pub mean: Vec<Estimate>,
    pub variance: Vec<f64>,
    /// `Var(W_j) = sigma^2 (1 - m^-j) / (m (m - 1))`.
    pub variance_closed_form: Vec<f64>,
    pub means_hold: bool,
    /// Empirical variances stay below the `L^2` limit `sigma^2/(m(m-1))` with slack.
    pub bounded: bool,
}

pub fn martingale_w_check(nu: &OffspringLaw, depth: usize, mc: &MonteCarlo) -> Result<MartingaleReport> {
    mc.check()?;
    let m = nu.mean();
    if !(m > 1.0) {
        return Err(Error::InvalidOffspring(format!("mean {m} must exceed 1")));
    }
    let nus = NuSampler::new(nu);
    let parts = mc.chunks(|rng, len| {
        let mut acc = vec![Moments::default(); depth + 1];
        for _ in 0..len {
            let mut z = 1usize;
            for (j, a) in acc.iter_mut().enumerate() {
                if j > 0 {
                    z = (0..z).map(|_| nus.sample(rng) as usize).sum();
                }
                a.push(z as f64 / m.powi(j as i32));
            }
        }
        acc
    });
    let sigma2 = nu.probs().iter().map(|&(k, p)| p * (k as f64 - m).powi(2)).sum::<f64>();
    let limit = sigma2 / (m * (m - 1.0));
    let merged: Vec<Moments> = (0..=depth).map(|j| merge_all(parts.iter().map(|p| &p[j]))).collect();
    let mean: Vec<Estimate> = merged.iter().map(|x| x.estimate()).collect();
    let variance: Vec<f64> = merged.iter().map(|x| x.var()).collect();
    let variance_closed_form: Vec<f64> = (0..=depth).map(|j| limit * (1.0 - m.powi(-(j as i32)))).collect();
    let means_hold = mean.iter().all(|e| e.within(1.0, 3.0));
    let bounded = variance.iter().all(|&v| v <= 1.25 * limit + 1e-12);
    Ok(MartingaleReport { depth, trials: mc.trials, mean, variance, variance_closed_form, means_hold, bounded })
}

/// Monte Carlo `P(max_{u in T_0} X(u) - n > b)` with standard errors.
pub fn max_leaf_probabilities(spec: &ModelSpec, n: usize, b_grid: &[f64], mc: &MonteCarlo) -> Result<Vec<(f64, f64)>> {
    mc.check()?;
    let x0 = X0Sampler::from_spec(spec)?;
    let nus = NuSampler::new(spec.nu());
    let unit = x0.unit() as f64;
    let parts = mc.chunks(|rng, len| {
        let mut acc = vec![Moments::default(); b_grid.len()];
        for _ in 0..len {
            let leaves = gw_population(&nus, n, rng);
            let top = (0..leaves).map(|_| x0.sample(rng)).max().unwrap_or(0) as f64 / unit;
            for (a, &b) in acc.iter_mut().zip(b_grid) {
                a.push((top - n as f64 > b + 1e-9) as u8 as f64);
            }
        }
        acc
    });
    Ok((0..b_grid.len())
        .map(|i| {
            let e = merge_all(parts.iter().map(|p| &p[i])).estimate();
            (e.mean, e.std_err)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmf::LatticeStep;

    fn binary() -> OffspringLaw {
        OffspringLaw::deterministic(2).unwrap()
    }

    fn one_two() -> OffspringLaw {
        OffspringLaw::uniform(&[1, 2]).unwrap()
    }

    #[test]
    fn binary_tree_has_full_leaf_set() {
        for seed in 0..5 {
            let t = sample_gw_tree(&binary(), 3, seed);
            assert_eq!(t.leaves(), 8);
        }
        let t = sample_gw_tree(&binary(), 0, 1);
        assert_eq!(t.leaves(), 1);
    }

    #[test]
    fn tree_is_reproducible() {
        let nu = OffspringLaw::uniform(&[1, 3]).unwrap();
        assert_eq!(sample_gw_tree(&nu, 6, 42), sample_gw_tree(&nu, 6, 42));
    }

    #[test]
    fn one_generation_leaf_counts() {
        let trees = enumerate_trees(&one_two(), 1, 100).unwrap();
        let mut got: Vec<(usize, f64)> = trees.iter().map(|(q, t)| (t.leaves(), *q)).collect();
        got.sort_by_key(|a| a.0);
        assert_eq!(got, vec![(1, 0.5), (2, 0.5)]);
    }

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let trees = enumerate_trees(&one_two(), 3, 1000).unwrap();
        assert_eq!(trees.len(), 42);
        let total: f64 = trees.iter().map(|x| x.0).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mean: f64 = trees.iter().map(|(q, t)| q * t.leaves() as f64).sum();
        assert!((mean - 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn evaluation_rule() {
        let t = sample_gw_tree(&binary(), 1, 0);
        assert_eq!(evaluate_with_leaves(&t, vec![2, 2], 1).unwrap().root(), 3);
        let t = sample_gw_tree(&binary(), 4, 0);
        assert_eq!(evaluate_with_leaves(&t, vec![0; 16], 1).unwrap().root(), 0);
    }

    #[test]
    fn size_biased_constant_has_one_brother() {
        let s = sample_spine(&binary(), 5, 3).unwrap();
        assert!(s.brothers.iter().all(|&b| b == 1));
        for i in 0..=5 {
            assert_eq!(s.subtree_leaves(i), 1 << i);
        }
    }

    #[test]
    fn population_law() {
        let law = gw_population_law(&one_two(), 1);
        assert_eq!(law, vec![0.0, 0.5, 0.5]);
        let law = gw_population_law(&one_two(), 2);
        // Z_2 = 1 w.p. 1/4, 2 w.p. 1/4 + 1/8, 3 w.p. 1/4, 4 w.p. 1/8
        let want = [0.0, 0.25, 0.375, 0.25, 0.125];
        for (a, b) in law.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_sides_agree_small_cases() {
        let nus = [one_two(), OffspringLaw::uniform(&[1, 3]).unwrap(), binary()];
        for nu in &nus {
            for n in 1..=3 {
                let mut gs = vec![PathFunctional::One, PathFunctional::SubtreeLeaves { j: n }];
                for j in 0..n {
                    gs.push(PathFunctional::NoBrotherLeaves { j });
                    gs.push(PathFunctional::LambdaSquared { j });
                    gs.push(PathFunctional::SubtreeLeaves { j });
                }
                for g in gs {
                    let a = many_to_one_lhs_exact(g, nu, n).unwrap();
                    let b = many_to_one_rhs_exact(g, nu, n).unwrap();
                    assert!((a - b).abs() < 1e-10 * a.max(1.0), "{g:?} n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn one_functional_counts_leaves() {
        let a = many_to_one_lhs_exact(PathFunctional::One, &one_two(), 3).unwrap();
        assert!((a - 3.375).abs() < 1e-12);
    }

    #[test]
    fn z_needs_room() {
        let spec = ModelSpec::new(binary(), LatticePmf::point(LatticeStep::UNIT, 2), 0.0).unwrap();
        let r = z_statistic(&spec, &ZConfig { b: 1.0, n: 6, ..Default::default() }, &MonteCarlo::new(2000, 1)).unwrap();
        assert_eq!(r.p_z.mean, 0.0);
        assert_eq!(r.p_exact, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn deterministic_martingale() {
        let r = martingale_w_check(&binary(), 6, &MonteCarlo::new(100, 0)).unwrap();
        assert!(r.mean.iter().all(|e| e.mean == 1.0));
        assert!(r.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_results_are_thread_independent() {
        let mc = MonteCarlo::new(5000, 9);
        let nu = OffspringLaw::uniform(&[1, 3]).unwrap();
        let a = martingale_w_check(&nu, 4, &mc).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| martingale_w_check(&nu, 4, &mc).unwrap());
        assert_eq!(a, b);
    }
}
