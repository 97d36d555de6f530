//! Brute-force enumeration of `(X_1 + ... + X_k - 1)^+` over every tuple of
//! values, shared by the oracle and acceptance tests.

use std::collections::BTreeMap;
use std::ops::{Add, Mul};

use drlab::engine::iterate;
use drlab::exact::{ratio, ExactOffspring, ExactPmf};
use drlab::{make_initial, LatticePmf, LatticeStep, ModelSpec, OffspringLaw};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;

/// Law of `(X_1 + ... + X_k - shift)^+` mixed over `nu`, by visiting every
/// nondecreasing index tuple once with its multinomial count. Masses are
/// integer numerators over a common denominator.
pub fn enumerate_step<T>(law: &BTreeMap<usize, T>, nu: &[(u32, T)], shift: usize, pad: &dyn Fn(u32) -> T) -> BTreeMap<usize, T>
where
    T: Clone + Zero + Add<Output = T> + Mul<Output = T> + From<u32>,
{
    let atoms: Vec<(usize, T)> = law.iter().map(|(k, m)| (*k, m.clone())).collect();
    let mut out: BTreeMap<usize, T> = BTreeMap::new();
    for (k, pk) in nu {
        let k = *k as usize;
        let mut idx = vec![0usize; k];
        loop {
            let mut sum = 0usize;
            let mut w = pk.clone() * pad(k as u32);
            for &i in &idx {
                sum += atoms[i].0;
                w = w * atoms[i].1.clone();
            }
            w = w * T::from(arrangements(&idx));
            let slot = out.entry(sum.saturating_sub(shift)).or_insert_with(T::zero);
            *slot = slot.clone() + w;
            // next nondecreasing tuple
            let mut pos = k;
            while pos > 0 && idx[pos - 1] + 1 == atoms.len() {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            let v = idx[pos - 1] + 1;
            for x in &mut idx[pos - 1..] {
                *x = v;
            }
        }
    }
    out.retain(|_, m| !m.is_zero());
    out
}

/// Orderings of a sorted tuple: `k! / prod(multiplicity!)`.
pub fn arrangements(idx: &[usize]) -> u32 {
    let fact = |n: usize| (1..=n as u32).product::<u32>();
    let mut out = fact(idx.len());
    let mut run = 1;
    for w in idx.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            out /= fact(run);
            run = 1;
        }
    }
    out / fact(run)
}

#[derive(Debug, Clone)]
pub struct Case {
    pub nu: Vec<(u32, i64)>,
    pub y0: Vec<(usize, i64)>,
    pub p_num: i64,
    pub half_step: bool,
    pub n: usize,
}

pub fn case() -> impl Strategy<Value = Case> {
    let nu = prop::collection::btree_map(1u32..=3, 1i64..=4, 1..=3)
        .prop_filter("mean above 1", |m| m.keys().any(|&k| k > 1))
        .prop_map(|m| m.into_iter().collect::<Vec<_>>());
    let y0 = prop::collection::btree_map(1usize..=3, 1i64..=4, 1..=3).prop_map(|m| m.into_iter().collect::<Vec<_>>());
    (nu, y0, 0i64..=8, any::<bool>(), 0usize..=4).prop_map(|(nu, y0, p_num, half_step, n)| Case { nu, y0, p_num, half_step, n })
}

fn total(w: &[(impl Copy, i64)]) -> i64 {
    w.iter().map(|x| x.1).sum()
}

/// Compares the rational and float engines with the enumeration at `c.n`.
pub fn check_case(c: &Case) -> Result<(), String> {
    let step = if c.half_step { LatticeStep::new(1, 2).unwrap() } else { LatticeStep::UNIT };
    let shift = step.steps_per_unit().unwrap();
    let (nu_tot, y_tot) = (total(&c.nu), total(&c.y0));

    // rational: engine step vs enumeration, exactly. The oracle keeps
    // integer numerators over `den`; each step multiplies `den` by
    // nu_tot * den^kmax and pads the k-fold terms with den^(kmax - k).
    let nu_q: Vec<(u32, BigRational)> = c.nu.iter().map(|&(k, w)| (k, ratio(w, nu_tot))).collect();
    let y0_q = ExactPmf::new(step, c.y0.iter().map(|&(k, w)| (k, ratio(w, y_tot)))).unwrap();
    let nu_exact = ExactOffspring::new(nu_q).unwrap();
    let mut engine_q = ExactPmf::initial(&y0_q, &ratio(c.p_num, 8)).unwrap();
    let nu_int: Vec<(u32, BigInt)> = c.nu.iter().map(|&(k, w)| (k, BigInt::from(w))).collect();
    let k_max = c.nu.iter().map(|x| x.0).max().unwrap();
    let mut den = BigInt::from(8 * y_tot);
    let mut oracle_int: BTreeMap<usize, BigInt> = BTreeMap::new();
    if c.p_num < 8 {
        oracle_int.insert(0, BigInt::from((8 - c.p_num) * y_tot));
    }
    for &(k, w) in &c.y0 {
        if c.p_num > 0 {
            oracle_int.insert(k, BigInt::from(c.p_num * w));
        }
    }
    for _ in 0..c.n {
        engine_q = engine_q.dr_step(&nu_exact).unwrap();
        let d = den.clone();
        oracle_int = enumerate_step(&oracle_int, &nu_int, shift, &|k| num_traits::pow(d.clone(), (k_max - k) as usize));
        den = BigInt::from(nu_tot) * num_traits::pow(den, k_max as usize);
    }
    let oracle_q: BTreeMap<usize, BigRational> =
        oracle_int.into_iter().map(|(k, m)| (k, BigRational::new(m, den.clone()))).collect();
    if engine_q.masses() != &oracle_q {
        return Err(format!("rational law differs: {:?} vs {:?}", engine_q.masses(), oracle_q));
    }

    // float: full engine vs float enumeration
    let nu_f: Vec<(u32, f64)> = c.nu.iter().map(|&(k, w)| (k, w as f64 / nu_tot as f64)).collect();
    let y0_f = LatticePmf::from_masses(step, c.y0.iter().map(|&(k, w)| (k, w as f64 / y_tot as f64))).unwrap();
    let spec = ModelSpec::new(OffspringLaw::new(nu_f.clone()).unwrap(), y0_f, c.p_num as f64 / 8.0).unwrap();
    let engine_f = iterate(&spec, c.n, 0.0).unwrap().last;
    let mut oracle_f: BTreeMap<usize, f64> = make_initial(&spec).iter().collect();
    for _ in 0..c.n {
        oracle_f = enumerate_step(&oracle_f, &nu_f, shift, &|_| 1.0);
    }
    let top = engine_f.max_index().unwrap_or(0).max(*oracle_q.keys().last().unwrap());
    for k in 0..=top {
        let want_q = oracle_q.get(&k).and_then(|m| m.to_f64()).unwrap_or(0.0);
        let want_f = oracle_f.get(&k).copied().unwrap_or(0.0);
        if (engine_f.mass(k) - want_f).abs() > 1e-12 {
            return Err(format!("index {k}: {} vs float oracle {want_f}", engine_f.mass(k)));
        }
        if (engine_f.mass(k) - want_q).abs() > 1e-12 {
            return Err(format!("index {k}: {} vs rational oracle {want_q}", engine_f.mass(k)));
        }
    }
    Ok(())
}
