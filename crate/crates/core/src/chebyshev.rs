//! Chebyshev series on an interval: roots grids, the fast cosine transform
//! from root values to coefficients, Clenshaw evaluation and integrals.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Chebyshev roots `cos(pi (k + 1/2) / n)` on `[-1, 1]`, in descending order.
pub fn roots(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (PI * (k as f64 + 0.5) / n as f64).cos())
        .collect()
}

/// Maps `[-1, 1]` onto `[lo, hi]`.
#[inline]
pub fn to_interval(t: f64, lo: f64, hi: f64) -> f64 {
    0.5 * (hi + lo) + 0.5 * (hi - lo) * t
}

#[inline]
pub fn from_interval(x: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * x - hi - lo) / (hi - lo)
}

/// Planned transform from values on [`roots`] to Chebyshev coefficients.
#[derive(Clone)]
pub struct RootsTransform {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    twiddle: Vec<Complex<f64>>,
}

impl std::fmt::Debug for RootsTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RootsTransform")
            .field("n", &self.n)
            .finish()
    }
}

impl RootsTransform {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let fft = FftPlanner::new().plan_fft_forward(n);
        let twiddle = (0..n)
            .map(|j| Complex::from_polar(1.0, -PI * j as f64 / (2 * n) as f64))
            .collect();
        Self { n, fft, twiddle }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Coefficients `c_j` such that `f(x_k) = sum_j c_j T_j(x_k)` on the
    /// roots grid (DCT-II by reordering into a complex FFT).
    pub fn coefficients(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(values.len(), n, "value count must match transform length");
        let mut v = vec![Complex::new(0.0, 0.0); n];
        for (k, &f) in values.iter().enumerate() {
            let idx = if k % 2 == 0 {
                k / 2
            } else {
                n - 1 - (k - 1) / 2
            };
            v[idx] = Complex::new(f, 0.0);
        }
        self.fft.process(&mut v);
        let scale = 2.0 / n as f64;
        let mut c: Vec<f64> = v
            .iter()
            .zip(&self.twiddle)
            .map(|(x, w)| (x * w).re * scale)
            .collect();
        c[0] *= 0.5;
        c
    }
}

/// Clenshaw evaluation of `sum_j c_j T_j(t)` for `t` in `[-1, 1]`.
#[inline]
pub fn clenshaw(c: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    let t2 = 2.0 * t;
    for &ck in c.iter().skip(1).rev() {
        let b0 = ck + t2 * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    c.first().copied().unwrap_or(0.0) + t * b1 - b2
}

/// `int_{-1}^{1} T_m(t) dt`.
#[inline]
pub fn integral_tm(m: usize) -> f64 {
    if m % 2 == 1 {
        0.0
    } else {
        2.0 / (1.0 - (m * m) as f64)
    }
}

/// `int_{-1}^{1} sum_j c_j T_j(t) dt`.
pub fn integral(c: &[f64]) -> f64 {
    c.iter()
        .enumerate()
        .step_by(2)
        .map(|(k, ck)| ck * integral_tm(k))
        .sum()
}

/// `int_{-1}^{1} f g dt` for two series, using `T_j T_k = (T_{j+k} + T_{|j-k|}) / 2`.
pub fn product_integral(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (j, aj) in a.iter().enumerate() {
        let mut inner = 0.0;
        for (k, bk) in b.iter().enumerate() {
            inner += bk * 0.5 * (integral_tm(j + k) + integral_tm(j.abs_diff(k)));
        }
        s += aj * inner;
    }
    s
}

/// Coefficients of the derivative series on `[-1, 1]`.
pub fn derivative(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    if n <= 1 {
        return vec![0.0];
    }
    let mut d = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let next = if k + 2 < n { d[k + 2] } else { 0.0 };
        d[k] = next + 2.0 * (k + 1) as f64 * c[k + 1];
    }
    d[0] *= 0.5;
    d.truncate(n - 1);
    d
}

/// A Chebyshev series on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChebSeries {
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl ChebSeries {
    /// Interpolant of values sampled on the roots grid of `[lo, hi]`; the
    /// values may be given in either ascending or descending node order.
    pub fn from_roots_values(values: &[f64], lo: f64, hi: f64, ascending: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to fit"));
        }
        if !(lo < hi) {
            return Err(Error::invalid(format!("empty interval [{lo}, {hi}]")));
        }
        let mut v = values.to_vec();
        if ascending {
            v.reverse();
        }
        let coeffs = RootsTransform::new(v.len()).coefficients(&v);
        Ok(Self { coeffs, lo, hi })
    }

    pub fn eval(&self, x: f64) -> f64 {
        clenshaw(&self.coeffs, from_interval(x, self.lo, self.hi))
    }

    pub fn derivative(&self) -> Self {
        let scale = 2.0 / (self.hi - self.lo);
        Self {
            coeffs: derivative(&self.coeffs)
                .into_iter()
                .map(|c| c * scale)
                .collect(),
            lo: self.lo,
            hi: self.hi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(values: &[f64]) -> Vec<f64> {
        let n = values.len();
        (0..n)
            .map(|j| {
                let s: f64 = values
                    .iter()
                    .enumerate()
                    .map(|(k, f)| f * (PI * j as f64 * (k as f64 + 0.5) / n as f64).cos())
                    .sum();
                s * if j == 0 { 1.0 } else { 2.0 } / n as f64
            })
            .collect()
    }

    #[test]
    fn fast_transform_matches_direct_sum() {
        for n in [1, 2, 3, 7, 16, 33, 64] {
            let x = roots(n);
            let f: Vec<f64> = x.iter().map(|t| (3.0 * t).sin() + t * t).collect();
            let fast = RootsTransform::new(n).coefficients(&f);
            let slow = naive(&f);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-13, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn polynomial_is_recovered_exactly() {
        // 7/30 + 3/4 T2 - 1/4 T4 = -23/30 + 3.5 t^2 - 2 t^4
        let x = roots(16);
        let f: Vec<f64> = x
            .iter()
            .map(|t| -23.0 / 30.0 + 3.5 * t * t - 2.0 * t.powi(4))
            .collect();
        let c = RootsTransform::new(16).coefficients(&f);
        let want = [7.0 / 30.0, 0.0, 0.75, 0.0, -0.25];
        for (j, cj) in c.iter().enumerate() {
            let w = want.get(j).copied().unwrap_or(0.0);
            assert!((cj - w).abs() < 1e-15, "c{j} = {cj}");
        }
        for &t in &[-1.0f64, -0.3, 0.0, 0.8, 1.0] {
            let direct = -23.0 / 30.0 + 3.5 * t * t - 2.0 * t.powi(4);
            assert!((clenshaw(&c, t) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn integrals() {
        // int T0 = 2, int T2 = -2/3, int T4 = -2/15
        assert_eq!(integral(&[1.0]), 2.0);
        assert!((integral(&[0.0, 5.0, 1.0]) + 2.0 / 3.0).abs() < 1e-15);
        assert!((integral(&[0.0, 0.0, 0.0, 0.0, 1.0]) + 2.0 / 15.0).abs() < 1e-15);
        // int (T1)^2 = int t^2 = 2/3 ; int T1 T2 = 0
        assert!((product_integral(&[0.0, 1.0], &[0.0, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert!(product_integral(&[0.0, 1.0], &[0.0, 0.0, 1.0]).abs() < 1e-15);
        // int (1 + t)(t^2) = 2/3
        let a = [1.0, 1.0];
        let b = [0.5, 0.0, 0.5];
        assert!((product_integral(&a, &b) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_series() {
        // d/dt (T3) = 3 U2 = 3 (4t^2 - 1) = 3 + 6 T2 ... check pointwise
        let c = [0.2, -0.4, 0.3, 1.0];
        let d = derivative(&c);
        for &t in &[-0.9, -0.1, 0.5] {
            let h = 1e-6;
            let fd = (clenshaw(&c, t + h) - clenshaw(&c, t - h)) / (2.0 * h);
            assert!((clenshaw(&d, t) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn series_on_interval() {
        let (lo, hi) = (-1.2, 0.4);
        let n = 24;
        let nodes: Vec<f64> = roots(n).iter().map(|&t| to_interval(t, lo, hi)).collect();
        let vals: Vec<f64> = nodes.iter().map(|x| x.exp()).collect();
        let s = ChebSeries::from_roots_values(&vals, lo, hi, false).unwrap();
        assert!((s.eval(-0.7) - (-0.7f64).exp()).abs() < 1e-14);
        assert!((s.derivative().eval(0.1) - 0.1f64.exp()).abs() < 1e-11);
        let mut asc = vals.clone();
        asc.reverse();
        let s2 = ChebSeries::from_roots_values(&asc, lo, hi, true).unwrap();
        assert_eq!(s.coeffs, s2.coeffs);
        assert!(ChebSeries::from_roots_values(&[], lo, hi, false).is_err());
        assert!(ChebSeries::from_roots_values(&vals, hi, lo, false).is_err());
    }
}
