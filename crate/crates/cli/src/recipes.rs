//! One function per recipe. Each returns the data table and a JSON summary;
//! the caller writes them and the manifest.

use std::fs::File;

use anyhow::{bail, Context, Result};
use meanfield_core::ensemble::{self, Family, InitMeasure, Mode, ScenarioConfig};
use meanfield_core::io;
use meanfield_core::response::{self, Basis, ResponseCurve, SweepSpec};
use meanfield_core::rng::{derive_seed, Purpose};
use meanfield_core::stats::{self, AutocovarianceEstimate, SurrogateNoiseModel};
use meanfield_core::thermo::{self, DensityRep, LyapunovConfig};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{req, BasisKind, ExperimentConfig};

pub struct Artifact {
    /// Body of `data.csv`.
    pub data: Vec<u8>,
    pub result: Value,
    /// Further files written next to `data.csv`.
    pub extra: Vec<(String, Vec<u8>)>,
}

impl Artifact {
    fn new(data: Vec<u8>, result: Value) -> Self {
        Self {
            data,
            result,
            extra: Vec::new(),
        }
    }
}

pub fn run(recipe: &str, c: &ExperimentConfig) -> Result<Artifact> {
    match recipe {
        "sweep-uncoupled" => sweep(c, Mode::Uncoupled),
        "sweep-torus" => {
            if c.ensemble.family != Some(Family::Torus) {
                bail!("sweep-torus needs family = \"torus\"");
            }
            sweep(c, Mode::Uncoupled)
        }
        "sweep-coupled" => sweep(c, Mode::Coupled),
        "lrt-test" => lrt_test(c),
        "cheb-analyze" => cheb_analyze(c),
        "noisy-scan" => noisy_scan(c),
        "thermo-fixed-point" => thermo_fixed_point(c),
        "thermo-bifurcate" => thermo_bifurcate(c),
        "thermo-lyapunov" => thermo_lyapunov(c),
        "thermo-susceptibility" => thermo_susceptibility(c),
        "surrogate-compare" => surrogate_compare(c),
        "multistability-search" => multistability_search(c),
        other => bail!("unknown recipe `{other}`"),
    }
}

fn seed(c: &ExperimentConfig) -> Result<u64> {
    req(&c.seed, "seed")
}

fn csv_of(
    write: impl FnOnce(&mut Vec<u8>) -> meanfield_core::error::Result<()>,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn dist_for(
    c: &ExperimentConfig,
    family: Family,
) -> Option<meanfield_core::maps::ParameterDistribution> {
    match family {
        Family::Expanding => None,
        _ => c.distribution.clone(),
    }
}

pub fn sweep_spec(c: &ExperimentConfig, mode: Mode) -> Result<SweepSpec> {
    let e = &c.ensemble;
    let family = req(&e.family, "ensemble.family")?;
    if family == Family::Torus && mode != Mode::Uncoupled {
        bail!("the torus family only runs uncoupled");
    }
    Ok(SweepSpec {
        family,
        mode,
        dist: dist_for(c, family),
        m: req(&e.m, "ensemble.M")?,
        n_steps: req(&e.n, "ensemble.N")?,
        burn_in: req(&e.burn_in, "ensemble.burn_in")?,
        realizations: req(&e.realizations, "ensemble.realizations")?,
        redraw: req(&e.redraw, "ensemble.redraw")?,
        shared_params: e.shared_params.unwrap_or(false),
        sigma_method: req(&e.sigma_method, "ensemble.sigma_method")?,
        init: req(&e.init, "ensemble.init")?,
        seed: seed(c)?,
    })
}

fn sweep(c: &ExperimentConfig, mode: Mode) -> Result<Artifact> {
    let spec = sweep_spec(c, mode)?;
    let g = &c.grid;
    let (lo, hi, j) = (
        req(&g.eps_lo, "grid.eps_lo")?,
        req(&g.eps_hi, "grid.eps_hi")?,
        req(&g.j, "grid.J")?,
    );
    let curve = response::sweep(&spec, lo, hi, j)?;
    let data = csv_of(|w| io::write_response_curve(w, &curve))?;
    let (min, max) = curve
        .mean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| {
            (a.min(m), b.max(m))
        });
    Ok(Artifact::new(
        data,
        json!({
            "description": curve.meta.description,
            "J": curve.len(),
            "n_steps": curve.n_steps,
            "mean_min": min,
            "mean_max": max,
            "max_stderr": curve.stderr().into_iter().fold(0.0f64, f64::max),
        }),
    ))
}

fn load_curve(c: &ExperimentConfig) -> Result<ResponseCurve> {
    let path = req(&c.analysis.input, "analysis.input")?;
    let f = File::open(&path)
        .with_context(|| format!("cannot open response table {}", path.display()))?;
    io::read_response_curve(f).with_context(|| format!("reading {}", path.display()))
}

fn lrt_test(c: &ExperimentConfig) -> Result<Artifact> {
    let curve = load_curve(c)?;
    let order = req(&c.analysis.order, "analysis.order")?;
    let basis = match req(&c.analysis.basis, "analysis.basis")? {
        BasisKind::Chebyshev => Basis::Chebyshev(order),
        BasisKind::Taylor => Basis::Taylor(order),
    };
    let r = response::lrt_test(&curve, basis)?;
    let data = csv_of(|w| io::write_rows(w, [&r]))?;
    let result = serde_json::to_value(&r)?;
    let mut art = Artifact::new(data, result.clone());
    art.extra
        .push(("result.json".into(), serde_json::to_vec_pretty(&result)?));
    Ok(art)
}

#[derive(Serialize)]
struct CoeffNoiseRow {
    k: usize,
    coeff: f64,
    noise: f64,
}

fn cheb_analyze(c: &ExperimentConfig) -> Result<Artifact> {
    let curve = load_curve(c)?;
    let series = response::cheb_fit(&curve)?;
    let noise = response::coefficient_noise(&curve)?;
    let factor = req(&c.analysis.noise_factor, "analysis.noise_factor")?;
    let k_min = req(&c.analysis.k_min, "analysis.k_min")?;
    let resolved = response::resolved_order(&series, &noise, factor);
    let fit = if resolved >= k_min {
        response::decay_rate(&series, k_min, resolved).ok()
    } else {
        None
    };
    let data = csv_of(|w| {
        io::write_rows(
            w,
            series
                .coeffs
                .iter()
                .zip(&noise)
                .enumerate()
                .map(|(k, (&coeff, &noise))| CoeffNoiseRow { k, coeff, noise }),
        )
    })?;
    Ok(Artifact::new(
        data,
        json!({
            "interval": [series.lo, series.hi],
            "resolved_order": resolved,
            "decay": fit,
        }),
    ))
}

fn noisy_scan(c: &ExperimentConfig) -> Result<Artifact> {
    let s = &c.scan;
    let rows = stats::noisy_logistic_scan(
        req(&s.a_lo, "scan.a_lo")?,
        req(&s.a_hi, "scan.a_hi")?,
        req(&s.da, "scan.da")?,
        req(&s.sigma, "scan.sigma")?,
        req(&c.ensemble.n, "ensemble.N")?,
        seed(c)?,
    )?;
    let outliers = stats::count_outliers(
        &rows,
        req(&s.half_window, "scan.half_window")?,
        req(&s.threshold, "scan.threshold")?,
    );
    let missing = rows.iter().filter(|r| r.mean_psi.is_none()).count();
    let data = csv_of(|w| io::write_scan_rows(w, &rows))?;
    Ok(Artifact::new(
        data,
        json!({ "points": rows.len(), "outliers": outliers, "missing": missing }),
    ))
}

/// Single `eps`, or `J` equispaced values on `[eps_lo, eps_hi]` when both
/// ends are given.
fn thermo_grid(c: &ExperimentConfig) -> Result<Vec<f64>> {
    let g = &c.grid;
    match (g.eps_lo, g.eps_hi) {
        (Some(lo), Some(hi)) => {
            let j = req(&g.j, "grid.J")?;
            if j < 2 || !(hi > lo) {
                bail!("need J >= 2 and eps_lo < eps_hi");
            }
            Ok((0..j)
                .map(|i| lo + (hi - lo) * i as f64 / (j - 1) as f64)
                .collect())
        }
        _ => Ok(vec![req(&g.eps, "grid.eps")?]),
    }
}

fn thermo_fixed_point(c: &ExperimentConfig) -> Result<Artifact> {
    let tol = req(&c.thermo.tol, "thermo.tol")?;
    let n = req(&c.ensemble.n, "ensemble.N")?;
    let grid = thermo_grid(c)?;
    let results: Vec<_> = grid
        .par_iter()
        .map(|&e| thermo::solve_fixed_point(e, tol))
        .collect::<meanfield_core::error::Result<_>>()?;
    // long-run cross-check of the primary root
    let summary: Vec<Value> = results
        .par_iter()
        .map(|fp| -> Result<Value> {
            let t = thermo::run_macro(fp.eps, n, &DensityRep::uniform())?;
            let last = *t.phi.last().context("empty trajectory")?;
            Ok(json!({
                "eps": fp.eps,
                "phi_bar": fp.phi_bar,
                "stable": fp.stable,
                "r_at_1": fp.r_at_1,
                "roots": fp.all_roots.len(),
                "run_macro_last": last,
            }))
        })
        .collect::<Result<_>>()?;
    let data = csv_of(|w| io::write_fixed_points(w, &results))?;
    let mut art = Artifact::new(data, json!({ "points": summary }));
    if let [fp] = results.as_slice() {
        art.extra.push((
            "density.csv".into(),
            csv_of(|w| io::write_density(w, &fp.density))?,
        ));
    }
    Ok(art)
}

fn thermo_bifurcate(c: &ExperimentConfig) -> Result<Artifact> {
    let g = &c.grid;
    let rows = thermo::bifurcation_scan(
        req(&g.eps_lo, "grid.eps_lo")?,
        req(&g.eps_hi, "grid.eps_hi")?,
        req(&g.j, "grid.J")?,
        req(&c.ensemble.n, "ensemble.N")?,
        req(&c.ensemble.burn_in, "ensemble.burn_in")?,
    )?;
    let first_cycle = rows.iter().find(|r| r.distinct(1e-6) > 1).map(|r| r.eps);
    let data = csv_of(|w| io::write_bifurcation(w, &rows))?;
    Ok(Artifact::new(
        data,
        json!({ "rows": rows.len(), "first_non_fixed_eps": first_cycle }),
    ))
}

#[derive(Serialize)]
struct ExponentRow {
    index: usize,
    exponent: f64,
}

fn thermo_lyapunov(c: &ExperimentConfig) -> Result<Artifact> {
    let t = &c.thermo;
    let cfg = LyapunovConfig {
        order: t.truncation_order,
        qr_interval: req(&t.qr_interval, "thermo.qr_interval")?,
    };
    let l = thermo::lyapunov_spectrum(
        req(&c.grid.eps, "grid.eps")?,
        req(&t.n_exp, "thermo.n_exp")?,
        req(&c.ensemble.n, "ensemble.N")?,
        req(&c.ensemble.burn_in, "ensemble.burn_in")?,
        cfg,
    )?;
    let data = csv_of(|w| {
        io::write_rows(
            w,
            l.iter().enumerate().map(|(i, &exponent)| ExponentRow {
                index: i + 1,
                exponent,
            }),
        )
    })?;
    Ok(Artifact::new(data, json!({ "exponents": l })))
}

fn thermo_susceptibility(c: &ExperimentConfig) -> Result<Artifact> {
    let eps = req(&c.grid.eps, "grid.eps")?;
    let fp = thermo::solve_fixed_point(eps, req(&c.thermo.tol, "thermo.tol")?)?;
    let chi = thermo::susceptibility(eps, fp.phi_bar, req(&c.thermo.horizon, "thermo.horizon")?)?;
    let df = thermo::df_deps(eps, fp.phi_bar, 1e-4)?;
    let data = csv_of(|w| io::write_susceptibility(w, &chi))?;
    Ok(Artifact::new(
        data,
        json!({
            "eps": eps,
            "phi_bar": fp.phi_bar,
            "r_of_one": chi.r_of_one,
            "tail_bound": chi.tail_bound,
            "stable": chi.stable(),
            "winding": chi.winding,
            "df_deps": df,
            "dphibar_deps": df / (1.0 - chi.r_of_one),
        }),
    ))
}

#[derive(Serialize)]
struct CompareRow {
    realization: usize,
    source: &'static str,
    mean_psi: f64,
    stderr_psi: f64,
    mean_phi: f64,
    var_phi: f64,
}

/// Coupled finite-M ensemble against the same ensemble driven by a Gaussian
/// surrogate of its own mean-field fluctuations.
fn surrogate_compare(c: &ExperimentConfig) -> Result<Artifact> {
    let e = &c.ensemble;
    let family = req(&e.family, "ensemble.family")?;
    if family == Family::Torus {
        bail!("the torus family has no mean field");
    }
    let (m, n, burn_in) = (
        req(&e.m, "ensemble.M")?,
        req(&e.n, "ensemble.N")?,
        req(&e.burn_in, "ensemble.burn_in")?,
    );
    let realizations = req(&e.realizations, "ensemble.realizations")?;
    let init = req(&e.init, "ensemble.init")?;
    let eps = req(&c.grid.eps, "grid.eps")?;
    let max_lag = req(&c.thermo.max_lag, "thermo.max_lag")?;
    let root = seed(c)?;
    let dist = dist_for(c, family);
    let rows: Vec<[CompareRow; 2]> = (0..realizations)
        .into_par_iter()
        .map(|r| -> Result<[CompareRow; 2]> {
            let s = derive_seed(root, r as u64, Purpose::Realization);
            let mut st = ensemble::init_ensemble(family, m, dist.as_ref(), s, init)?;
            let coupled = ensemble::run(&mut st, &ScenarioConfig::coupled(eps), n, burn_in)?;
            let (phi_mean, _) = stats::birkhoff_mean(&coupled.phi, 0)?;
            let acv = stats::autocovariance(&coupled.phi, max_lag)?;
            let scaled = AutocovarianceEstimate::from_values(
                acv.values.iter().map(|v| v * m as f64).collect(),
                acv.n_samples,
            )?;
            let model = SurrogateNoiseModel::new(scaled, None, Some(m))?;
            let driver = stats::surrogate_driver(
                phi_mean,
                &model,
                n,
                derive_seed(root, r as u64, Purpose::Surrogate),
            )?;
            let s2 = derive_seed(root, (realizations + r) as u64, Purpose::Realization);
            let mut st2 = ensemble::init_ensemble(family, m, dist.as_ref(), s2, init)?;
            let driven = ensemble::run(&mut st2, &ScenarioConfig::driven(eps, driver), n, burn_in)?;
            let row = |source, ts: &ensemble::TimeSeries| -> Result<CompareRow> {
                let (mean_psi, stderr_psi) = stats::birkhoff_mean(&ts.psi, 0)?;
                let mean_phi = ts.phi.iter().sum::<f64>() / ts.phi.len() as f64;
                let var_phi = ts.phi.iter().map(|p| (p - mean_phi).powi(2)).sum::<f64>()
                    / ts.phi.len() as f64;
                Ok(CompareRow {
                    realization: r,
                    source,
                    mean_psi,
                    stderr_psi,
                    mean_phi,
                    var_phi,
                })
            };
            Ok([row("coupled", &coupled)?, row("surrogate", &driven)?])
        })
        .collect::<Result<_>>()?;
    let pooled = |i: usize| -> Result<(f64, f64)> {
        let v: Vec<f64> = rows.iter().map(|p| p[i].mean_psi).collect();
        if v.len() >= 2 {
            Ok(stats::replication_mean(&v)?)
        } else {
            Ok((v[0], rows[0][i].stderr_psi))
        }
    };
    let (cm, cs) = pooled(0)?;
    let (sm, ss) = pooled(1)?;
    let z = (cm - sm) / (cs * cs + ss * ss).sqrt();
    let data = csv_of(|w| io::write_rows(w, rows.iter().flatten()))?;
    Ok(Artifact::new(
        data,
        json!({
            "coupled_mean_psi": cm,
            "coupled_stderr": cs,
            "surrogate_mean_psi": sm,
            "surrogate_stderr": ss,
            "z": z,
        }),
    ))
}

#[derive(Serialize)]
struct EquilibriumRow {
    realization: usize,
    alpha: f64,
    beta: f64,
    mean_psi: f64,
    stderr_psi: f64,
    mean_phi: f64,
}

/// Coupled runs from randomized initial laws; distinct long-time means
/// indicate coexisting equilibria.
fn multistability_search(c: &ExperimentConfig) -> Result<Artifact> {
    let e = &c.ensemble;
    let family = req(&e.family, "ensemble.family")?;
    let (m, n, burn_in) = (
        req(&e.m, "ensemble.M")?,
        req(&e.n, "ensemble.N")?,
        req(&e.burn_in, "ensemble.burn_in")?,
    );
    let init = req(&e.init, "ensemble.init")?;
    let eps = req(&c.grid.eps, "grid.eps")?;
    let root = seed(c)?;
    let dist = dist_for(c, family);
    let rows: Vec<EquilibriumRow> = (0..req(&e.realizations, "ensemble.realizations")?)
        .into_par_iter()
        .map(|r| -> Result<EquilibriumRow> {
            let s = derive_seed(root, r as u64, Purpose::Realization);
            let (alpha, beta) = match init.resolve(s) {
                InitMeasure::Beta { alpha, beta } => (alpha, beta),
                _ => (1.0, 1.0),
            };
            let mut st = ensemble::init_ensemble(family, m, dist.as_ref(), s, init)?;
            let ts = ensemble::run(&mut st, &ScenarioConfig::coupled(eps), n, burn_in)?;
            let (mean_psi, stderr_psi) = stats::birkhoff_mean(&ts.psi, 0)?;
            let mean_phi = ts.phi.iter().sum::<f64>() / ts.phi.len() as f64;
            Ok(EquilibriumRow {
                realization: r,
                alpha,
                beta,
                mean_psi,
                stderr_psi,
                mean_phi,
            })
        })
        .collect::<Result<_>>()?;
    let clusters = count_clusters(&rows);
    let data = csv_of(|w| io::write_rows(w, &rows))?;
    Ok(Artifact::new(
        data,
        json!({ "realizations": rows.len(), "clusters": clusters }),
    ))
}

/// Groups of long-time means separated by more than five combined standard
/// errors.
fn count_clusters(rows: &[EquilibriumRow]) -> usize {
    let mut v: Vec<(f64, f64)> = rows.iter().map(|r| (r.mean_psi, r.stderr_psi)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    if v.is_empty() {
        return 0;
    }
    1 + v
        .windows(2)
        .filter(|w| w[1].0 - w[0].0 > 5.0 * (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt())
        .count()
}
