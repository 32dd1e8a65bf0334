//! Response of long-time averages to the perturbation strength: sweeps on a
//! Chebyshev grid, Chebyshev analysis of the resulting curve and the
//! chi-squared test for a smooth (low-order) response.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chebyshev::{self, ChebSeries};
use crate::ensemble::{self, Family, InitMeasure, Mode, RunOptions, ScenarioConfig};
use crate::error::{Error, Result};
use crate::maps::{self, ParameterDistribution};
use crate::rng::{derive_seed, Purpose};
use crate::special;
use crate::stats;

/// Long-time averages on a grid of perturbation strengths.
///
/// `sigma` is the Birkhoff standard deviation: the estimate at `eps[j]` has
/// standard error `sigma[j] / sqrt(n_steps)`, where `n_steps` counts every
/// recorded step across realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_steps: usize,
    pub meta: CurveMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub description: String,
    pub seed: u64,
    pub realizations: usize,
    #[serde(rename = "M")]
    pub m: usize,
}

impl ResponseCurve {
    pub fn new(eps: Vec<f64>, mean: Vec<f64>, sigma: Vec<f64>, n_steps: usize) -> Result<Self> {
        let curve = Self {
            eps,
            mean,
            sigma,
            n_steps,
            meta: CurveMeta::default(),
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.eps.len();
        if self.mean.len() != j || self.sigma.len() != j {
            return Err(Error::invalid("eps, mean and sigma lengths differ"));
        }
        if self.eps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("eps must be strictly increasing"));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn stderr(&self) -> Vec<f64> {
        let rn = (self.n_steps as f64).sqrt();
        self.sigma.iter().map(|s| s / rn).collect()
    }

    /// Interval `[lo, hi]` whose roots grid is `eps`, if it is one.
    pub fn roots_interval(&self) -> Result<(f64, f64)> {
        let j = self.eps.len();
        if j < 2 {
            return Err(Error::invalid("need at least two grid points"));
        }
        let c = (std::f64::consts::PI / (2 * j) as f64).cos();
        let (first, last) = (self.eps[0], self.eps[j - 1]);
        let half = (last - first) / (2.0 * c);
        let mid = 0.5 * (first + last);
        let (lo, hi) = (mid - half, mid + half);
        let tol = 1e-9 * (hi - lo);
        for (x, want) in self.eps.iter().zip(roots_grid(j, lo, hi)) {
            if (x - want).abs() > tol {
                return Err(Error::invalid(format!(
                    "grid is not a Chebyshev roots grid (node {x} vs {want})"
                )));
            }
        }
        Ok((lo, hi))
    }
}

/// Roots of `T_J` mapped onto `[lo, hi]`, ascending.
pub fn roots_grid(j: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut g: Vec<f64> = chebyshev::roots(j)
        .into_iter()
        .map(|t| chebyshev::to_interval(t, lo, hi))
        .collect();
    g.reverse();
    g
}

/// How per-point standard errors are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMethod {
    /// Spread of independent realizations at each grid point.
    Replications,
    /// One-way ANOVA across the grid: the within-point mean square pooled
    /// over all grid points (assumes a slowly varying variance).
    Pooled,
    /// Batch means along a single realization.
    Batch,
}

/// Result of one realization at one grid point.
#[derive(Debug, Clone, Copy)]
pub struct PointEstimate {
    pub mean: f64,
    /// Batch-means standard error of `mean`.
    pub stderr: f64,
    pub steps: usize,
}

/// Generic sweep: `evaluate(eps, realization)` is called for every grid point
/// and realization.
pub fn sweep_with<F>(
    lo: f64,
    hi: f64,
    j: usize,
    realizations: usize,
    method: SigmaMethod,
    evaluate: F,
) -> Result<ResponseCurve>
where
    F: Fn(usize, f64, usize) -> Result<PointEstimate> + Sync,
{
    if j < 4 {
        return Err(Error::config(format!("grid size >= 4 required, got {j}")));
    }
    if !(lo < hi) {
        return Err(Error::config(format!("empty interval [{lo}, {hi}]")));
    }
    if realizations == 0 {
        return Err(Error::config("at least one realization required"));
    }
    if method != SigmaMethod::Batch && realizations < 2 {
        return Err(Error::config(
            "replication-based sigma needs >= 2 realizations",
        ));
    }
    let grid = roots_grid(j, lo, hi);
    let jobs: Vec<(usize, usize)> = (0..j)
        .flat_map(|i| (0..realizations).map(move |r| (i, r)))
        .collect();
    let results: Vec<PointEstimate> = jobs
        .par_iter()
        .map(|&(i, r)| evaluate(i, grid[i], r))
        .collect::<Result<_>>()?;
    let groups: Vec<Vec<PointEstimate>> = results.chunks(realizations).map(<[_]>::to_vec).collect();
    let steps_per_point = groups[0].iter().map(|p| p.steps).sum::<usize>();
    let mut mean = Vec::with_capacity(j);
    let mut stderr = Vec::with_capacity(j);
    match method {
        SigmaMethod::Batch => {
            for g in &groups {
                let m = g.iter().map(|p| p.mean).sum::<f64>() / g.len() as f64;
                let v =
                    g.iter().map(|p| p.stderr * p.stderr).sum::<f64>() / (g.len() * g.len()) as f64;
                mean.push(m);
                stderr.push(v.sqrt());
            }
        }
        SigmaMethod::Replications => {
            for g in &groups {
                let values: Vec<f64> = g.iter().map(|p| p.mean).collect();
                let (m, se) = stats::replication_mean(&values)?;
                mean.push(m);
                stderr.push(se);
            }
        }
        SigmaMethod::Pooled => {
            let values: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| g.iter().map(|p| p.mean).collect())
                .collect();
            let table = stats::anova_table(&values)?;
            let se = (table.ms_within / realizations as f64).sqrt();
            for v in &values {
                mean.push(v.iter().sum::<f64>() / v.len() as f64);
                stderr.push(se);
            }
        }
    }
    let rn = (steps_per_point as f64).sqrt();
    // a noise-free responder gives zero spread; keep sigma strictly positive
    let sigma = stderr
        .iter()
        .map(|s| (s * rn).max(f64::MIN_POSITIVE))
        .collect();
    let curve = ResponseCurve {
        eps: grid,
        mean,
        sigma,
        n_steps: steps_per_point,
        meta: CurveMeta {
            realizations,
            ..CurveMeta::default()
        },
    };
    curve.validate()?;
    Ok(curve)
}

/// Ensemble experiment evaluated at each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub family: Family,
    pub mode: Mode,
    pub dist: Option<ParameterDistribution>,
    #[serde(rename = "M")]
    pub m: usize,
    /// Steps per realization, including burn-in.
    pub n_steps: usize,
    pub burn_in: usize,
    pub realizations: usize,
    /// Fresh parameters for every grid point and realization (the proxy for
    /// the infinite ensemble); otherwise realization `r` uses the same
    /// parameters at every grid point.
    pub redraw: bool,
    /// With `redraw` off, every realization shares one parameter draw and
    /// differs only in its initial conditions.
    #[serde(default)]
    pub shared_params: bool,
    pub sigma_method: SigmaMethod,
    pub init: InitMeasure,
    pub seed: u64,
}

/// Runs the ensemble experiment at every point of a `J`-point roots grid.
pub fn sweep(spec: &SweepSpec, lo: f64, hi: f64, j: usize) -> Result<ResponseCurve> {
    if spec.family == Family::Expanding && spec.dist.is_some() {
        return Err(Error::config(
            "the expanding family takes no parameter distribution",
        ));
    }
    if spec.n_steps <= spec.burn_in {
        return Err(Error::config("need n_steps > burn_in"));
    }
    let recorded = spec.n_steps - spec.burn_in;
    let evaluate = |i: usize, eps: f64, r: usize| -> Result<PointEstimate> {
        let point_seed = derive_seed(
            spec.seed,
            (i * spec.realizations + r) as u64,
            Purpose::Realization,
        );
        let mut state = match (&spec.dist, spec.redraw) {
            (Some(dist), false) => {
                let draw = if spec.shared_params { 0 } else { r as u64 };
                let params = maps::sample_parameters(
                    dist,
                    spec.m,
                    derive_seed(spec.seed, draw, Purpose::Parameters),
                )?;
                ensemble::init_ensemble_with_params(spec.family, params, point_seed, spec.init)?
            }
            (dist, _) => {
                ensemble::init_ensemble(spec.family, spec.m, dist.as_ref(), point_seed, spec.init)?
            }
        };
        let config = ScenarioConfig {
            mode: spec.mode,
            eps,
            driver: None,
        };
        let out = ensemble::run_with(
            &mut state,
            &config,
            spec.n_steps,
            spec.burn_in,
            RunOptions::default(),
        )?;
        let (mean, stderr) = stats::birkhoff_mean(&out.series.psi, 0)?;
        Ok(PointEstimate {
            mean,
            stderr,
            steps: recorded,
        })
    };
    let mut curve = sweep_with(lo, hi, j, spec.realizations, spec.sigma_method, evaluate)?;
    curve.meta = CurveMeta {
        description: format!(
            "{} {:?} M={} redraw={}",
            spec.family.name(),
            spec.mode,
            spec.m,
            spec.redraw
        ),
        seed: spec.seed,
        realizations: spec.realizations,
        m: spec.m,
    };
    Ok(curve)
}

/// Chebyshev interpolant of a curve sampled on a roots grid.
pub fn cheb_fit(curve: &ResponseCurve) -> Result<ChebSeries> {
    let (lo, hi) = curve.roots_interval()?;
    ChebSeries::from_roots_values(&curve.mean, lo, hi, true)
}

/// Standard deviation of each fitted coefficient induced by the point noise.
pub fn coefficient_noise(curve: &ResponseCurve) -> Result<Vec<f64>> {
    let (lo, hi) = curve.roots_interval()?;
    let j = curve.len();
    let se = curve.stderr();
    let t: Vec<f64> = curve
        .eps
        .iter()
        .map(|&x| chebyshev::from_interval(x, lo, hi))
        .collect();
    Ok((0..j)
        .map(|k| {
            let w = if k == 0 { 1.0 } else { 2.0 } / j as f64;
            let var: f64 = t
                .iter()
                .zip(&se)
                .map(|(&tj, s)| {
                    let tk = (k as f64 * tj.clamp(-1.0, 1.0).acos()).cos();
                    (w * s * tk).powi(2)
                })
                .sum();
            var.sqrt()
        })
        .collect())
}

/// Consecutive sub-noise coefficients that end the resolved range.
pub const RESOLVED_GAP: usize = 4;

/// Last `k` whose coefficient exceeds `factor` times its noise level before
/// [`RESOLVED_GAP`] consecutive coefficients fall below it. Single dips are
/// tolerated because oscillating coefficients cross zero.
pub fn resolved_order(series: &ChebSeries, noise: &[f64], factor: f64) -> usize {
    let mut k = 0;
    let mut run = 0;
    for (i, (c, s)) in series.coeffs.iter().zip(noise).enumerate().skip(1) {
        if c.abs() > factor * s {
            k = i;
            run = 0;
        } else {
            run += 1;
            if run == RESOLVED_GAP {
                break;
            }
        }
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub used: Vec<usize>,
    /// Orders dropped for falling under the noise floor.
    pub excluded: Vec<usize>,
}

/// Least-squares slope of `ln |c_k|` against `ln k` for `k_min <= k <= k_max`,
/// skipping coefficients below `1e-12 max |c_k|`.
pub fn decay_rate(series: &ChebSeries, k_min: usize, k_max: usize) -> Result<DecayFit> {
    if k_min < 1 || k_max < k_min {
        return Err(Error::invalid(format!(
            "bad order range [{k_min}, {k_max}]"
        )));
    }
    if k_max >= series.coeffs.len() {
        return Err(Error::invalid(format!(
            "k_max {k_max} beyond {} coefficients",
            series.coeffs.len()
        )));
    }
    let peak = series.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let floor = peak * 1e-12;
    let (used, excluded): (Vec<usize>, Vec<usize>) =
        (k_min..=k_max).partition(|&k| series.coeffs[k].abs() > floor);
    if used.len() < 5 {
        return Err(Error::TooFewSamples(format!(
            "{} usable coefficients in [{k_min}, {k_max}] (need 5)",
            used.len()
        )));
    }
    let lx: Vec<f64> = used.iter().map(|&k| (k as f64).ln()).collect();
    let ly: Vec<f64> = used.iter().map(|&k| series.coeffs[k].abs().ln()).collect();
    let slope = stats::linear_slope(&lx, &ly);
    let n = lx.len() as f64;
    let intercept = (ly.iter().sum::<f64>() - slope * lx.iter().sum::<f64>()) / n;
    Ok(DecayFit {
        slope,
        intercept,
        used,
        excluded,
    })
}

/// Candidate smooth responses. `order` is the highest degree, so the basis
/// has `order + 1` functions; both span the same polynomial space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "order", rename_all = "kebab-case")]
pub enum Basis {
    Taylor(usize),
    Chebyshev(usize),
}

impl Basis {
    pub fn size(self) -> usize {
        match self {
            Basis::Taylor(o) | Basis::Chebyshev(o) => o + 1,
        }
    }

    pub fn name(self) -> String {
        match self {
            Basis::Taylor(o) => format!("taylor({o})"),
            Basis::Chebyshev(o) => format!("chebyshev({o})"),
        }
    }

    /// Basis functions at `t` in `[-1, 1]`.
    fn row(self, t: f64) -> Vec<f64> {
        let n = self.size();
        let mut out = vec![0.0; n];
        match self {
            Basis::Taylor(_) => {
                let mut p = 1.0;
                for v in out.iter_mut() {
                    *v = p;
                    p *= t;
                }
            }
            Basis::Chebyshev(_) => {
                out[0] = 1.0;
                if n > 1 {
                    out[1] = t;
                }
                for k in 2..n {
                    out[k] = 2.0 * t * out[k - 1] - out[k - 2];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtTestResult {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub basis: String,
    pub basis_size: usize,
    pub bias_check: f64,
}

/// Residual projector `(I - H)` applied through a QR factorisation of the
/// weighted design matrix.
struct Projector {
    q: DMatrix<f64>,
}

impl Projector {
    fn new(curve: &ResponseCurve, basis: Basis) -> Result<Self> {
        curve.validate()?;
        let j = curve.len();
        let i = basis.size();
        if j <= i {
            return Err(Error::invalid(format!("need J > I (J = {j}, I = {i})")));
        }
        let lo = curve.eps[0];
        let hi = curve.eps[j - 1];
        let rn = (curve.n_steps as f64).sqrt();
        let mut x = DMatrix::zeros(j, i);
        for (row, (&e, &s)) in curve.eps.iter().zip(&curve.sigma).enumerate() {
            let w = rn / s;
            let t = chebyshev::from_interval(e, lo, hi);
            for (col, v) in basis.row(t).into_iter().enumerate() {
                x[(row, col)] = w * v;
            }
        }
        // scale columns so the rank test is independent of units
        for mut col in x.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        let qr = x.qr();
        let r = qr.r();
        let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
        let peak = diag.iter().cloned().fold(0.0, f64::max);
        let rank = diag.iter().filter(|&&d| d > 1e-10 * peak).count();
        if rank < i {
            return Err(Error::RankDeficient { rank, cols: i });
        }
        Ok(Self { q: qr.q() })
    }

    fn residual_norm2(&self, y: &DVector<f64>) -> f64 {
        let fitted = &self.q * (self.q.transpose() * y);
        (y - fitted).norm_squared()
    }
}

/// The chi-squared test of the null hypothesis that the response lies in the
/// span of `basis`, with `y_j = sqrt(N) mean_j / sigma_j`.
pub fn lrt_test(curve: &ResponseCurve, basis: Basis) -> Result<LrtTestResult> {
    let proj = Projector::new(curve, basis)?;
    let rn = (curve.n_steps as f64).sqrt();
    let y = DVector::from_iterator(
        curve.len(),
        curve.mean.iter().zip(&curve.sigma).map(|(m, s)| rn * m / s),
    );
    let chi2 = proj.residual_norm2(&y);
    let dof = curve.len() - basis.size();
    let p_value = special::chi2_sf(chi2, dof as f64).clamp(0.0, 1.0);
    Ok(LrtTestResult {
        chi2,
        dof,
        p_value,
        basis: basis.name(),
        basis_size: basis.size(),
        bias_check: bias_check(curve, basis)?,
    })
}

/// `N || (I - H) (mean / sigma) ||^2`, the non-centrality the data would
/// carry if `mean` were the exact response.
pub fn bias_check(curve: &ResponseCurve, basis: Basis) -> Result<f64> {
    let proj = Projector::new(curve, basis)?;
    let v = DVector::from_iterator(
        curve.len(),
        curve.mean.iter().zip(&curve.sigma).map(|(m, s)| m / s),
    );
    Ok(curve.n_steps as f64 * proj.residual_norm2(&v))
}
