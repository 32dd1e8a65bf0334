//! Statistical reductions: Birkhoff means with error bars, autocovariances,
//! one-way ANOVA, parameter-redraw covariances, Gaussian surrogate noise and
//! the noisy single logistic map.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::ensemble::DriverSignal;
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use crate::special;

/// Mean of `series[burn_in..]` and its standard error from `floor(sqrt(n))`
/// batch means.
pub fn birkhoff_mean(series: &[f64], burn_in: usize) -> Result<(f64, f64)> {
    if series.len() <= burn_in {
        return Err(Error::TooFewSamples(format!(
            "series of length {} has nothing after burn-in {burn_in}",
            series.len()
        )));
    }
    let xs = &series[burn_in..];
    let n = xs.len();
    let batches = (n as f64).sqrt().floor() as usize;
    if batches < 2 {
        return Err(Error::TooFewSamples(format!(
            "{n} samples are too few for batch means"
        )));
    }
    let size = n / batches;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let batch_means: Vec<f64> = xs
        .chunks_exact(size)
        .take(batches)
        .map(|b| b.iter().sum::<f64>() / size as f64)
        .collect();
    let bm = batch_means.iter().sum::<f64>() / batches as f64;
    let var = batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (batches - 1) as f64;
    Ok((mean, (var / batches as f64).sqrt()))
}

/// Mean and standard error across independent replications.
pub fn replication_mean(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples(
            "need at least two replications".into(),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocovarianceEstimate {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
    pub n_samples: usize,
}

impl AutocovarianceEstimate {
    /// An exact autocovariance given lag by lag from zero.
    pub fn from_values(values: Vec<f64>, n_samples: usize) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "autocovariance needs finite values from lag 0",
            ));
        }
        if values[0] < 0.0 {
            return Err(Error::invalid(
                "autocovariance at lag 0 must be nonnegative",
            ));
        }
        Ok(Self {
            lags: (0..values.len()).collect(),
            values,
            n_samples,
        })
    }

    pub fn max_lag(&self) -> usize {
        self.values.len() - 1
    }

    /// Lags where `|C(m)|` exceeds `C(0)` by more than the sampling noise
    /// `C(0) / sqrt(n)`. These are warnings, not errors.
    pub fn suspicious_lags(&self) -> Vec<usize> {
        let c0 = self.values[0];
        let slack = c0 / (self.n_samples.max(1) as f64).sqrt();
        self.lags
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| v.abs() > c0 + slack)
            .map(|(l, _)| *l)
            .collect()
    }
}

/// Biased (`1/n`) estimator of the centered autocovariance up to `max_lag`.
pub fn autocovariance(series: &[f64], max_lag: usize) -> Result<AutocovarianceEstimate> {
    let n = series.len();
    if max_lag >= n {
        return Err(Error::invalid(format!(
            "max_lag {max_lag} >= series length {n}"
        )));
    }
    if n < 10 * max_lag.max(1) {
        return Err(Error::TooFewSamples(format!(
            "length {n} < 10 * max_lag ({max_lag})"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let values = (0..=max_lag)
        .into_par_iter()
        .map(|m| {
            centered[..n - m]
                .iter()
                .zip(&centered[m..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect();
    Ok(AutocovarianceEstimate {
        lags: (0..=max_lag).collect(),
        values,
        n_samples: n,
    })
}

/// Classical one-way ANOVA table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub ss_within: f64,
    pub ss_between: f64,
    pub ss_total: f64,
    pub df_within: usize,
    pub df_between: usize,
    /// Pooled within-group variance.
    pub ms_within: f64,
    /// Variance of group means scaled by group size.
    pub ms_between: f64,
    pub grand_mean: f64,
}

pub fn anova_table(groups: &[Vec<f64>]) -> Result<AnovaTable> {
    if groups.len() < 2 {
        return Err(Error::invalid("ANOVA needs at least two groups"));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::invalid(format!(
            "ANOVA group of size {} (need >= 2)",
            g.len()
        )));
    }
    let total_n: usize = groups.iter().map(Vec::len).sum();
    let grand_mean = groups.iter().flatten().sum::<f64>() / total_n as f64;
    let mut ss_within = 0.0;
    let mut ss_between = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        ss_between += g.len() as f64 * (m - grand_mean).powi(2);
    }
    let ss_total = groups
        .iter()
        .flatten()
        .map(|x| (x - grand_mean).powi(2))
        .sum();
    let df_between = groups.len() - 1;
    let df_within = total_n - groups.len();
    Ok(AnovaTable {
        ss_within,
        ss_between,
        ss_total,
        df_within,
        df_between,
        ms_within: ss_within / df_within as f64,
        ms_between: ss_between / df_between as f64,
        grand_mean,
    })
}

/// `(within, between)` mean squares.
pub fn anova_decompose(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    let t = anova_table(groups)?;
    Ok((t.ms_within, t.ms_between))
}

/// Covariance across parameter redraws of per-draw Birkhoff means, scaled to
/// a single unit: entry `(i, k)` estimates `<eta^{eps_i} eta^{eps_k}>`.
///
/// `per_draw(d)` must return the Birkhoff means at every `eps` for the `d`-th
/// independent parameter draw (the same draw across `eps`), obtained from an
/// ensemble of `m_per_draw` units.
pub fn eta_covariance<F>(
    n_eps: usize,
    n_redraws: usize,
    m_per_draw: usize,
    per_draw: F,
) -> Result<DMatrix<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if n_redraws < 30 {
        return Err(Error::config(format!(
            "eta covariance needs >= 30 redraws, got {n_redraws}"
        )));
    }
    if m_per_draw == 0 || n_eps == 0 {
        return Err(Error::config(
            "eta covariance needs M >= 1 and at least one eps",
        ));
    }
    let draws: Vec<Vec<f64>> = (0..n_redraws)
        .into_par_iter()
        .map(&per_draw)
        .collect::<Result<_>>()?;
    if draws.iter().any(|d| d.len() != n_eps) {
        return Err(Error::invalid("per-draw means have the wrong length"));
    }
    let n = n_redraws as f64;
    let means: Vec<f64> = (0..n_eps)
        .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n)
        .collect();
    let mut cov = DMatrix::zeros(n_eps, n_eps);
    for i in 0..n_eps {
        for k in i..n_eps {
            let c = draws
                .iter()
                .map(|d| (d[i] - means[i]) * (d[k] - means[k]))
                .sum::<f64>()
                / (n - 1.0)
                * m_per_draw as f64;
            cov[(i, k)] = c;
            cov[(k, i)] = c;
        }
    }
    Ok(cov)
}

/// Gaussian model of the finite-size fluctuation of the mean field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNoiseModel {
    /// Autocovariance of the unscaled fluctuation `zeta`.
    pub acv: AutocovarianceEstimate,
    /// Variance of the quenched parameter offset `eta`, if parameters are
    /// random.
    pub eta_var: Option<f64>,
    /// `1/sqrt(M)`; zero in the infinite-ensemble limit.
    pub scale: f64,
}

impl SurrogateNoiseModel {
    /// Model for an ensemble of `m` units; `None` means infinitely many.
    pub fn new(
        acv: AutocovarianceEstimate,
        eta_var: Option<f64>,
        m: Option<usize>,
    ) -> Result<Self> {
        let scale = match m {
            None => 0.0,
            Some(0) => return Err(Error::config("M must be positive")),
            Some(m) => 1.0 / (m as f64).sqrt(),
        };
        if let Some(v) = eta_var {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("eta variance {v} is negative")));
            }
        }
        Ok(Self {
            acv,
            eta_var,
            scale,
        })
    }
}

/// Parzen lag window on `[0, 1]`.
pub fn parzen(u: f64) -> f64 {
    let u = u.abs();
    if u <= 0.5 {
        1.0 - 6.0 * u * u + 6.0 * u * u * u
    } else if u <= 1.0 {
        2.0 * (1.0 - u).powi(3)
    } else {
        0.0
    }
}

/// Largest tolerated ratio of floored negative eigenvalue mass to total
/// spectral mass.
const EMBED_NEGATIVE_TOL: f64 = 1e-2;

/// Stationary Gaussian sequence of length `n` whose autocovariance is the
/// Parzen-tapered `acv`, by circulant embedding.
pub fn synthesize_noise(acv: &AutocovarianceEstimate, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if acv.values.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let lmax = acv.max_lag();
    let taper: Vec<f64> = acv
        .values
        .iter()
        .enumerate()
        .map(|(m, c)| {
            if lmax == 0 {
                *c
            } else {
                c * parzen(m as f64 / (lmax + 1) as f64)
            }
        })
        .collect();
    let p = (2 * n.max(lmax + 1)).next_power_of_two();
    let mut row = vec![Complex::new(0.0, 0.0); p];
    for (m, &c) in taper.iter().enumerate() {
        row[m].re = c;
        if m > 0 {
            row[p - m].re = c;
        }
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(p);
    fft.process(&mut row);
    let total: f64 = row.iter().map(|z| z.re.abs()).sum();
    let negative: f64 = row.iter().map(|z| (-z.re).max(0.0)).sum();
    if negative > EMBED_NEGATIVE_TOL * total {
        return Err(Error::NotEmbeddable(format!(
            "negative spectral mass {negative:e} of total {total:e} (embedding size {p}, max lag {lmax})"
        )));
    }
    let mut rng = CounterRng::new(seed, 0, Purpose::Surrogate);
    let mut z: Vec<Complex<f64>> = row
        .iter()
        .map(|l| {
            let s = (l.re.max(0.0) / p as f64).sqrt();
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(s * a, s * b)
        })
        .collect();
    fft.process(&mut z);
    Ok(z.iter().take(n).map(|c| c.re).collect())
}

/// Driver `d_n = phi_bar + (zeta_n + eta) / sqrt(M)` for the surrogate
/// closure of a coupled ensemble.
pub fn surrogate_driver(
    phi_bar: f64,
    model: &SurrogateNoiseModel,
    n: usize,
    seed: u64,
) -> Result<DriverSignal> {
    if model.scale == 0.0 {
        return DriverSignal::new(vec![phi_bar; n]);
    }
    let zeta = synthesize_noise(&model.acv, n, seed)?;
    let eta = match model.eta_var {
        Some(v) if v > 0.0 => {
            let z: f64 = CounterRng::new(seed, 1, Purpose::Surrogate).sample(StandardNormal);
            z * v.sqrt()
        }
        _ => 0.0,
    };
    DriverSignal::new(
        zeta.iter()
            .map(|z| phi_bar + model.scale * (z + eta))
            .collect(),
    )
}

/// One row of the noisy logistic scan; `mean_psi` is `None` when the orbit
/// could not be kept in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub a: f64,
    pub mean_psi: Option<f64>,
    pub stderr: Option<f64>,
}

/// Redraws allowed per step before an orbit is declared escaped.
pub const NOISY_MAX_REDRAWS: usize = 100;

/// Birkhoff mean of `q` for `q' = a q (1 - q) + sigma xi` on a grid of `a`.
/// A step that leaves `[0, 1]` is redrawn with fresh noise. The first tenth
/// of each orbit is discarded.
pub fn noisy_logistic_scan(
    a_lo: f64,
    a_hi: f64,
    da: f64,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ScanRow>> {
    if !(da > 0.0) || !(a_hi >= a_lo) {
        return Err(Error::config(format!(
            "bad scan grid [{a_lo}, {a_hi}] step {da}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise level {sigma} is negative")));
    }
    if n < 40 {
        return Err(Error::config("scan needs N >= 40"));
    }
    let count = ((a_hi - a_lo) / da + 1e-9).floor() as usize + 1;
    let burn_in = n / 10;
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let a = a_lo + i as f64 * da;
            match noisy_orbit_mean(a, sigma, n, burn_in, seed, i as u64) {
                Some((m, s)) => ScanRow {
                    a,
                    mean_psi: Some(m),
                    stderr: Some(s),
                },
                None => ScanRow {
                    a,
                    mean_psi: None,
                    stderr: None,
                },
            }
        })
        .collect())
}

fn noisy_orbit_mean(
    a: f64,
    sigma: f64,
    n: usize,
    burn_in: usize,
    seed: u64,
    index: u64,
) -> Option<(f64, f64)> {
    let mut q = CounterRng::new(seed, index, Purpose::InitState).uniform_open();
    let mut noise = CounterRng::new(seed, index, Purpose::MapNoise);
    let mut orbit = Vec::with_capacity(n - burn_in);
    for t in 0..n {
        let base = a * q * (1.0 - q);
        let next = if sigma == 0.0 {
            base
        } else {
            let mut accepted = None;
            for _ in 0..NOISY_MAX_REDRAWS {
                let xi: f64 = noise.sample(StandardNormal);
                let c = base + sigma * xi;
                if (0.0..=1.0).contains(&c) {
                    accepted = Some(c);
                    break;
                }
            }
            accepted?
        };
        if !(0.0..=1.0).contains(&next) {
            return None;
        }
        q = next;
        if t >= burn_in {
            orbit.push(q);
        }
    }
    birkhoff_mean(&orbit, 0).ok()
}

/// Number of scan points whose mean differs from the median of the
/// surrounding `2 * half_window + 1` points by more than `threshold`.
/// Missing values are ignored.
pub fn count_outliers(rows: &[ScanRow], half_window: usize, threshold: f64) -> usize {
    let values: Vec<Option<f64>> = rows.iter().map(|r| r.mean_psi).collect();
    (0..values.len())
        .filter(|&i| {
            let Some(v) = values[i] else { return false };
            let lo = i.saturating_sub(half_window);
            let hi = (i + half_window + 1).min(values.len());
            let mut w: Vec<f64> = values[lo..hi].iter().flatten().copied().collect();
            w.sort_by(|a, b| a.total_cmp(b));
            let med = w[w.len() / 2];
            (v - med).abs() > threshold
        })
        .count()
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1): `(D, p)`.
pub fn ks_uniform(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples("KS test on no samples".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok((d, special::ks_p_value(d, xs.len())))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "log-log slope needs two or more paired points",
        ));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(linear_slope(&lx, &ly))
}

pub(crate) fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Two-sided p-value of a standard normal z-score.
pub fn z_test_p(z: f64) -> f64 {
    2.0 * special::normal_cdf(-z.abs())
}

/// Period-two points of `a q (1 - q)` for `3 < a < 1 + sqrt(6)`.
pub fn logistic_period_two(a: f64) -> (f64, f64) {
    let s = ((a + 1.0) * (a - 3.0)).sqrt();
    ((a + 1.0 - s) / (2.0 * a), (a + 1.0 + s) / (2.0 * a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = CounterRng::new(seed, 0, Purpose::Synthetic);
        let s = (1.0 - rho * rho).sqrt();
        let mut x: f64 = rng.sample(StandardNormal);
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                x = rho * x + s * e;
                x
            })
            .collect()
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = CounterRng::new(seed, 0, Purpose::Synthetic);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn logistic4_orbit(n: usize) -> Vec<f64> {
        let mut q = 0.123_456_789;
        (0..n)
            .map(|_| {
                q = 4.0 * q * (1.0 - q);
                q
            })
            .collect()
    }

    #[test]
    fn birkhoff_constant_and_iid() {
        assert_eq!(birkhoff_mean(&[2.5; 100], 10).unwrap(), (2.5, 0.0));
        let xs = normals(1_000_000, 1);
        let (m, se) = birkhoff_mean(&xs, 0).unwrap();
        assert!(m.abs() < 5e-3);
        assert!((se / 1e-3 - 1.0).abs() < 0.3, "stderr {se}");
        assert!(birkhoff_mean(&[1.0, 2.0], 2).is_err());
        assert!(birkhoff_mean(&[1.0, 2.0, 3.0], 0).is_err());
    }

    #[test]
    fn birkhoff_logistic_four() {
        let orbit = logistic4_orbit(1_000_000);
        let (m, se) = birkhoff_mean(&orbit, 1000).unwrap();
        assert!((m - 0.5).abs() < 5.0 * se, "{m} +- {se}");
    }

    #[test]
    fn stderr_scales_as_inverse_root_n() {
        let xs = normals(1_000_000, 9);
        let ns = [10_000.0, 100_000.0, 1_000_000.0];
        let se: Vec<f64> = ns
            .iter()
            .map(|&n| birkhoff_mean(&xs[..n as usize], 0).unwrap().1)
            .collect();
        let slope = log_log_slope(&ns, &se).unwrap();
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn autocovariance_examples() {
        let c = autocovariance(&[3.0; 100], 5).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));

        let mut rng = CounterRng::new(2, 0, Purpose::Synthetic);
        let rad: Vec<f64> = (0..1_000_000)
            .map(|_| if rng.next_u64_top() { 1.0 } else { -1.0 })
            .collect();
        let c = autocovariance(&rad, 10).unwrap();
        assert!((c.values[0] - 1.0).abs() < 0.01);
        assert!(c.values[1..].iter().all(|v| v.abs() <= 0.01));
        assert!(c.suspicious_lags().is_empty());

        let x = ar1(1_000_000, 0.5, 3);
        let c = autocovariance(&x, 5).unwrap();
        for m in 0..=5 {
            assert!((c.values[m] / c.values[0] - 0.5f64.powi(m as i32)).abs() < 0.02);
        }
        assert!(autocovariance(&x[..10], 10).is_err());
        assert!(autocovariance(&x[..50], 10).is_err());
    }

    trait TopBit {
        fn next_u64_top(&mut self) -> bool;
    }
    impl TopBit for CounterRng {
        fn next_u64_top(&mut self) -> bool {
            rand::RngCore::next_u64(self) >> 63 == 1
        }
    }

    #[test]
    fn anova_examples() {
        assert_eq!(
            anova_decompose(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            (0.0, 0.0)
        );
        let (w, b) = anova_decompose(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(w, 0.0);
        assert!(b > 0.0);
        assert!(anova_decompose(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_decompose(&[vec![1.0, 2.0], vec![1.0]]).is_err());

        // tau^2 = 1 between, noise 1 within, n = 20 per group
        let mut rng = CounterRng::new(4, 0, Purpose::Synthetic);
        let n = 20;
        let groups: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let mu: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| mu + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let t = anova_table(&groups).unwrap();
        assert!(
            (t.ms_between / (n as f64 + 1.0) - 1.0).abs() < 0.1,
            "{}",
            t.ms_between
        );
        assert!((t.ms_within - 1.0).abs() < 0.05);
        assert!(((t.ss_within + t.ss_between) - t.ss_total).abs() <= 1e-10 * t.ss_total);
    }

    #[test]
    fn eta_covariance_properties() {
        // single atom: per-draw means do not depend on the draw
        let cov = eta_covariance(3, 30, 10, |_| Ok(vec![0.1, 0.2, 0.3])).unwrap();
        assert!(cov.iter().all(|&v| v.abs() < 1e-20));
        assert!(eta_covariance(1, 29, 10, |_| Ok(vec![0.0])).is_err());

        // random draws with a shared component: symmetric and PSD
        let cov = eta_covariance(4, 200, 1, |d| {
            let mut rng = CounterRng::new(7, d as u64, Purpose::Synthetic);
            let common: f64 = rng.sample(StandardNormal);
            Ok((0..4)
                .map(|i| {
                    common * (1.0 + i as f64 * 0.1) + 0.3 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect())
        })
        .unwrap();
        assert_eq!(cov.clone(), cov.transpose());
        let eig = cov.clone().symmetric_eigen();
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min >= -0.05 * cov.trace() / 4.0);
        assert!((0..4).all(|i| cov[(i, i)] >= 0.0));

        // scaling by the ensemble size
        let base = |d: usize| {
            let mut rng = CounterRng::new(8, d as u64, Purpose::Synthetic);
            Ok(vec![rng.sample::<f64, _>(StandardNormal)])
        };
        let c1 = eta_covariance(1, 100, 1, base).unwrap()[(0, 0)];
        let c5 = eta_covariance(1, 100, 5, base).unwrap()[(0, 0)];
        assert!((c5 - 5.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn synthesize_white_and_zero() {
        let white = AutocovarianceEstimate::from_values(vec![1.0, 0.0, 0.0], 0).unwrap();
        let z = synthesize_noise(&white, 1_000_000, 5).unwrap();
        let c = autocovariance(&z, 10).unwrap();
        assert!((c.values[0] - 1.0).abs() < 0.01);
        assert!(c.values[1..].iter().all(|v| v.abs() <= 0.01));
        let zero = AutocovarianceEstimate::from_values(vec![0.0; 4], 0).unwrap();
        assert!(synthesize_noise(&zero, 100, 5)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            synthesize_noise(&white, 1000, 5).unwrap(),
            synthesize_noise(&white, 1000, 5).unwrap()
        );
    }

    #[test]
    fn synthesize_ar1() {
        let target: Vec<f64> = (0..=100).map(|m| 0.5f64.powi(m)).collect();
        let model = AutocovarianceEstimate::from_values(target.clone(), 0).unwrap();
        let z = synthesize_noise(&model, 1_000_000, 6).unwrap();
        let c = autocovariance(&z, 10).unwrap();
        for m in 0..=10 {
            assert!(
                (c.values[m] - target[m]).abs() < 0.02,
                "lag {m}: {}",
                c.values[m]
            );
        }
    }

    #[test]
    fn non_embeddable_acv_is_rejected() {
        // C(1) > C(0) has a strongly negative spectrum
        let bad = AutocovarianceEstimate::from_values(vec![1.0, -3.0, 2.5, -1.0], 0).unwrap();
        assert!(matches!(
            synthesize_noise(&bad, 1000, 1),
            Err(Error::NotEmbeddable(_))
        ));
    }

    #[test]
    fn surrogate_driver_examples() {
        let acv = AutocovarianceEstimate::from_values(vec![0.2, 0.05], 0).unwrap();
        let inf = SurrogateNoiseModel::new(acv.clone(), None, None).unwrap();
        assert!(surrogate_driver(0.3, &inf, 50, 1)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.3));
        let fin = SurrogateNoiseModel::new(acv, Some(0.1), Some(100)).unwrap();
        let a = surrogate_driver(0.3, &fin, 50, 1).unwrap();
        assert_eq!(a, surrogate_driver(0.3, &fin, 50, 1).unwrap());
        assert_ne!(a, surrogate_driver(0.3, &fin, 50, 2).unwrap());
    }

    #[test]
    fn noisy_scan_deterministic_cases() {
        let rows = noisy_logistic_scan(4.0, 4.0, 0.1, 0.0, 1_000_000, 1).unwrap();
        assert_eq!(rows.len(), 1);
        let (m, se) = (rows[0].mean_psi.unwrap(), rows[0].stderr.unwrap());
        assert!((m - 0.5).abs() < 5.0 * se, "{m} {se}");

        let rows = noisy_logistic_scan(3.2, 3.2, 0.1, 0.0, 100_000, 1).unwrap();
        let (p, q) = logistic_period_two(3.2);
        let want = 0.5 * (p + q);
        assert!((want - 0.65625).abs() < 1e-15);
        let (m, se) = (rows[0].mean_psi.unwrap(), rows[0].stderr.unwrap());
        assert!((m - want).abs() <= se + 1e-12, "{m} vs {want}");

        assert!(noisy_logistic_scan(3.0, 3.1, 0.0, 0.0, 1000, 1).is_err());
        assert!(noisy_logistic_scan(3.0, 3.1, 0.01, -1.0, 1000, 1).is_err());
        assert_eq!(
            noisy_logistic_scan(3.0, 3.1, 0.01, 0.0, 1000, 1)
                .unwrap()
                .len(),
            11
        );
    }

    #[test]
    fn noisy_scan_escape_is_missing() {
        let rows = noisy_logistic_scan(3.9, 3.9, 0.1, 10.0, 1000, 1).unwrap();
        assert!(rows[0].mean_psi.is_none());
    }

    #[test]
    fn outliers_and_ks() {
        let rows: Vec<ScanRow> = (0..50)
            .map(|i| ScanRow {
                a: i as f64,
                mean_psi: Some(if i == 25 { 1.0 } else { 0.5 }),
                stderr: None,
            })
            .collect();
        assert_eq!(count_outliers(&rows, 5, 0.01), 1);

        let mut rng = CounterRng::new(3, 0, Purpose::Synthetic);
        let u: Vec<f64> = (0..5000).map(|_| rng.uniform()).collect();
        let (_, p) = ks_uniform(&u).unwrap();
        assert!(p > 0.01);
        let skew: Vec<f64> = u.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skew).unwrap().1 < 1e-6);
    }

    #[test]
    fn slope_helpers() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 1.5).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
        assert!((z_test_p(0.0) - 1.0).abs() < 1e-15);
        assert!((z_test_p(1.96) - 0.05).abs() < 1e-3);
    }
}
