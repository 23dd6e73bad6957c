//! Truncated convolution and correlation for triangular Toeplitz factors.
//!
//! Short bands use the direct O(d²) loops; longer ones go through an FFT of
//! twice the length so the linear (not circular) product is recovered.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

const FFT_THRESHOLD: usize = 64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// `out_i = Σ_{s=0..=i} a_s x_{i-s}` for `i < x.len()`.
pub(crate) fn convolve(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    debug_assert_eq!(a.len(), d);
    if d < FFT_THRESHOLD {
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..=i).map(|s| a[s] * x[i - s]).sum();
        }
        return out;
    }
    let n = (2 * d).next_power_of_two();
    let (fwd, inv) = plans(n);
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fa.resize(n, Complex::default());
    let mut fx: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fx.resize(n, Complex::default());
    fwd.process(&mut fa);
    fwd.process(&mut fx);
    for (p, q) in fa.iter_mut().zip(&fx) {
        *p *= q;
    }
    inv.process(&mut fa);
    let norm = 1.0 / n as f64;
    fa[..d].iter().map(|c| c.re * norm).collect()
}

/// `out_i = Σ_s a_s x_{i+s}` for `i < x.len()`.
pub(crate) fn correlate(a: &[f64], x: &[f64]) -> Vec<f64> {
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    let mut out = convolve(a, &rev);
    out.reverse();
    out
}
