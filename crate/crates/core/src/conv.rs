//! Dense convolution kernels.
//!
//! Small products use the direct O(ab) sum; large ones go through an FFT.
//! FFT output carries absolute round-off of order `eps * log2(len)` relative
//! to the input masses, so entries below that floor are flushed and handed
//! back to the caller, who must account for them as removed mass, and every
//! other entry may sit below its true value by up to that floor. On the
//! direct path the only loss is underflow of tiny products, which is
//! reported per position.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Above this many multiply-adds the FFT path is used.
pub const DIRECT_WORK_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Default)]
pub struct ConvOutput {
    pub values: Vec<f64>,
    /// Entries zeroed after the FFT path, as `(position, mass)`.
    pub flushed: Vec<(usize, f64)>,
    /// Upper bounds on mass lost to underflow, as `(position, ln mass)`.
    pub lost: Vec<(usize, f64)>,
    /// Bound on `true - computed` at every output position.
    pub abs_err: f64,
}

/// Smallest positive entry, or infinity.
pub fn min_positive(a: &[f64]) -> f64 {
    a.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min)
}

pub fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    convolve_direct_tracked(a, b).0
}

/// Direct convolution plus, per output position, the sum of products that
/// fell below the normal range (in log form). A product in that range loses
/// at most its own size, so the sums bound the underflow loss.
pub fn convolve_direct_tracked(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<(usize, f64)>) {
    if a.is_empty() || b.is_empty() {
        return (Vec::new(), Vec::new());
    }
    // products in [2^-2148, 2^-1022) stay finite after scaling by 2^1600
    let half_scale = 2f64.powi(800);
    let scale_ln = 1600.0 * std::f64::consts::LN_2;
    let b_min = min_positive(b);
    let mut out = vec![0.0; a.len() + b.len() - 1];
    let mut tiny: Vec<f64> = Vec::new();
    let mut b_scaled: Vec<f64> = Vec::new();
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &mut out[i..i + b.len()];
        for (o, &y) in row.iter_mut().zip(b) {
            *o += x * y;
        }
        if x * b_min < f64::MIN_POSITIVE {
            if tiny.is_empty() {
                tiny = vec![0.0; out.len()];
                b_scaled = b.iter().map(|&y| y * half_scale).collect();
            }
            let xs = x * half_scale;
            let row = &mut tiny[i..i + b.len()];
            for ((t, &y), &ys) in row.iter_mut().zip(b).zip(&b_scaled) {
                let hit = x * y < f64::MIN_POSITIVE;
                *t += if hit { xs * ys } else { 0.0 };
            }
        }
    }
    let lost = tiny
        .iter()
        .enumerate()
        .filter(|&(_, &t)| t > 0.0)
        .map(|(k, &t)| (k, t.ln() - scale_ln))
        .collect();
    (out, lost)
}

pub fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    // Pack both real inputs into one complex transform.
    let mut buf: Vec<Complex<f64>> = (0..size)
        .map(|i| {
            Complex::new(
                a.get(i).copied().unwrap_or(0.0),
                b.get(i).copied().unwrap_or(0.0),
            )
        })
        .collect();
    fwd.process(&mut buf);

    let mut prod = vec![Complex::new(0.0, 0.0); size];
    for k in 0..size {
        let z = buf[k];
        let zc = buf[(size - k) % size].conj();
        let fa = (z + zc) * 0.5;
        let fb = (z - zc) * Complex::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    inv.process(&mut prod);
    let scale = 1.0 / size as f64;
    prod.truncate(out_len);
    prod.into_iter().map(|z| z.re * scale).collect()
}

/// Round-off floor for the FFT path given the input totals.
pub fn fft_noise_floor(a_total: f64, b_total: f64, len: usize) -> f64 {
    let levels = (len.max(2) as f64).log2();
    16.0 * f64::EPSILON * levels * a_total.max(f64::MIN_POSITIVE) * b_total.max(f64::MIN_POSITIVE)
}

pub fn convolve(a: &[f64], b: &[f64]) -> ConvOutput {
    if a.len().saturating_mul(b.len()) <= DIRECT_WORK_LIMIT || a.len().min(b.len()) <= 16 {
        let (values, lost) = convolve_direct_tracked(a, b);
        return ConvOutput { values, flushed: Vec::new(), lost, abs_err: 0.0 };
    }
    let mut values = convolve_fft(a, b);
    let floor = fft_noise_floor(a.iter().sum(), b.iter().sum(), values.len());
    let mut flushed = Vec::new();
    for (i, v) in values.iter_mut().enumerate() {
        if *v < floor {
            if *v > 0.0 {
                flushed.push((i, *v));
            }
            *v = 0.0;
        }
    }
    ConvOutput { values, flushed, lost: Vec::new(), abs_err: floor }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn direct_small_example() {
        let out = convolve_direct(&[0.8, 0.0, 0.2], &[0.8, 0.0, 0.2]);
        let want = [0.64, 0.0, 0.32, 0.0, 0.04];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-15);
        }
    }

    #[test]
    fn fft_agrees_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(la, lb) in &[(3usize, 5usize), (257, 1000), (4096, 3000)] {
            let mut a: Vec<f64> = (0..la).map(|_| rng.gen::<f64>()).collect();
            let mut b: Vec<f64> = (0..lb).map(|_| rng.gen::<f64>()).collect();
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            a.iter_mut().for_each(|x| *x /= sa);
            b.iter_mut().for_each(|x| *x /= sb);
            let d = convolve_direct(&a, &b);
            let f = convolve_fft(&a, &b);
            assert_eq!(d.len(), f.len());
            let worst = d
                .iter()
                .zip(&f)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "({la},{lb}) worst {worst}");
        }
    }

    #[test]
    fn auto_path_flushes_only_tiny_entries() {
        let a: Vec<f64> = (0..5000).map(|i| if i % 2 == 0 { 1.0 / 2500.0 } else { 0.0 }).collect();
        let out = convolve(&a, &a);
        let floor = fft_noise_floor(1.0, 1.0, out.values.len());
        assert!(out.flushed.iter().all(|&(_, v)| v < floor));
        let total: f64 = out.values.iter().sum::<f64>() + out.flushed.iter().map(|x| x.1).sum::<f64>();
        assert!((total - 1.0).abs() < 1e-10);
        // odd positions are exactly zero in the true result
        assert!(out.values.iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }
}
