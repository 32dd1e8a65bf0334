//! CSV tables for every result type. Floats are written in shortest
//! round-trip form, so a table read back reproduces the values exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::chebyshev::ChebSeries;
use crate::ensemble::TimeSeries;
use crate::error::{Error, Result};
use crate::response::ResponseCurve;
use crate::stats::{AutocovarianceEstimate, ScanRow};
use crate::thermo::{
    BifurcationRow, DensityRep, FixedPointResult, MacroTrajectory, SusceptibilitySeries,
};

/// Writes one header line and a row per record.
pub fn write_rows<W: Write, R: Serialize>(w: W, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(true).from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    Ok(rd
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    n: u64,
    phi: f64,
    psi: f64,
}

/// Columns `n, phi, psi`; `n` is absolute time.
pub fn write_time_series<W: Write>(w: W, ts: &TimeSeries) -> Result<()> {
    let start = ts.meta.start_step;
    write_rows(
        w,
        ts.phi
            .iter()
            .zip(&ts.psi)
            .enumerate()
            .map(|(i, (&phi, &psi))| SeriesRow {
                n: start + i as u64,
                phi,
                psi,
            }),
    )
}

/// The JSON sidecar of a time series.
pub fn series_meta_json(ts: &TimeSeries) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ts.meta)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    eps: f64,
    mean: f64,
    sigma: f64,
    stderr: f64,
    n_steps: usize,
}

/// Columns `eps, mean, sigma, stderr, n_steps`.
pub fn write_response_curve<W: Write>(w: W, curve: &ResponseCurve) -> Result<()> {
    let se = curve.stderr();
    write_rows(
        w,
        (0..curve.len()).map(|j| CurveRow {
            eps: curve.eps[j],
            mean: curve.mean[j],
            sigma: curve.sigma[j],
            stderr: se[j],
            n_steps: curve.n_steps,
        }),
    )
}

pub fn read_response_curve<R: Read>(r: R) -> Result<ResponseCurve> {
    let rows: Vec<CurveRow> = read_rows(r)?;
    let n_steps = rows
        .first()
        .map(|r| r.n_steps)
        .ok_or_else(|| Error::invalid("empty response table"))?;
    if rows.iter().any(|r| r.n_steps != n_steps) {
        return Err(Error::invalid("n_steps differs between rows"));
    }
    ResponseCurve::new(
        rows.iter().map(|r| r.eps).collect(),
        rows.iter().map(|r| r.mean).collect(),
        rows.iter().map(|r| r.sigma).collect(),
        n_steps,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct CoeffRow {
    k: usize,
    coeff: f64,
    lo: f64,
    hi: f64,
}

/// Columns `k, coeff, lo, hi`.
pub fn write_cheb_series<W: Write>(w: W, s: &ChebSeries) -> Result<()> {
    write_rows(
        w,
        s.coeffs.iter().enumerate().map(|(k, &coeff)| CoeffRow {
            k,
            coeff,
            lo: s.lo,
            hi: s.hi,
        }),
    )
}

pub fn read_cheb_series<R: Read>(r: R) -> Result<ChebSeries> {
    let rows: Vec<CoeffRow> = read_rows(r)?;
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("empty coefficient table"))?;
    if rows.iter().enumerate().any(|(i, r)| r.k != i) {
        return Err(Error::invalid("coefficient indices must be 0, 1, 2, ..."));
    }
    Ok(ChebSeries {
        coeffs: rows.iter().map(|r| r.coeff).collect(),
        lo: first.lo,
        hi: first.hi,
    })
}

/// A density on `[-1, 1]` as a coefficient table.
pub fn write_density<W: Write>(w: W, rho: &DensityRep) -> Result<()> {
    write_cheb_series(
        w,
        &ChebSeries {
            coeffs: rho.coeffs.clone(),
            lo: -1.0,
            hi: 1.0,
        },
    )
}

/// Columns `a, mean_psi, stderr`; missing values are empty fields.
pub fn write_scan_rows<W: Write>(w: W, rows: &[ScanRow]) -> Result<()> {
    write_rows(w, rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct LagRow {
    lag: usize,
    value: f64,
}

/// Columns `lag, value`.
pub fn write_autocovariance<W: Write>(w: W, acv: &AutocovarianceEstimate) -> Result<()> {
    write_rows(
        w,
        acv.lags
            .iter()
            .zip(&acv.values)
            .map(|(&lag, &value)| LagRow { lag, value }),
    )
}

#[derive(Debug, Serialize)]
struct MacroRow {
    n: usize,
    phi: f64,
    #[serde(rename = "K")]
    k: f64,
}

/// Columns `n, phi, K`.
pub fn write_macro_trajectory<W: Write>(w: W, t: &MacroTrajectory) -> Result<()> {
    write_rows(
        w,
        t.phi
            .iter()
            .zip(&t.k)
            .enumerate()
            .map(|(n, (&phi, &k))| MacroRow { n, phi, k }),
    )
}

#[derive(Debug, Serialize)]
struct RootRow {
    eps: f64,
    phi_bar: f64,
    residual: f64,
    stable: bool,
    r_at_1: f64,
    primary: bool,
}

/// One row per fixed point: `eps, phi_bar, residual, stable, r_at_1, primary`.
pub fn write_fixed_points<W: Write>(w: W, results: &[FixedPointResult]) -> Result<()> {
    write_rows(
        w,
        results.iter().flat_map(|fp| {
            fp.all_roots.iter().map(move |r| RootRow {
                eps: fp.eps,
                phi_bar: r.phi_bar,
                residual: r.residual,
                stable: r.stable,
                r_at_1: r.r_at_1,
                primary: r.phi_bar == fp.phi_bar,
            })
        }),
    )
}

#[derive(Debug, Serialize)]
struct ChiRow {
    k: usize,
    chi: f64,
}

/// Columns `k, chi` for `k = 1..`.
pub fn write_susceptibility<W: Write>(w: W, s: &SusceptibilitySeries) -> Result<()> {
    write_rows(
        w,
        s.chi
            .iter()
            .enumerate()
            .map(|(i, &chi)| ChiRow { k: i + 1, chi }),
    )
}

#[derive(Debug, Serialize)]
struct BifRow {
    eps: f64,
    sample: usize,
    phi: f64,
}

/// Long format: `eps, sample, phi`.
pub fn write_bifurcation<W: Write>(w: W, rows: &[BifurcationRow]) -> Result<()> {
    write_rows(
        w,
        rows.iter().flat_map(|r| {
            r.samples
                .iter()
                .enumerate()
                .map(move |(sample, &phi)| BifRow {
                    eps: r.eps,
                    sample,
                    phi,
                })
        }),
    )
}
