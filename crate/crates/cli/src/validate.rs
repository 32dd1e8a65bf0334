//! Checks a config without running it and estimates its cost.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Result};
use meanfield_core::ensemble::Family;
use meanfield_core::response::SigmaMethod;

use crate::config::{self, req, ExperimentConfig, Overrides};

/// Measured single-thread cost of one unit advanced one step, in ns.
const NS_PER_UNIT_STEP: [(Family, f64); 3] = [
    (Family::Logistic, 1.2),
    (Family::Torus, 3.0),
    (Family::Expanding, 1.4),
];
/// One macroscopic step of the spectral solver at the default order, in ns.
const NS_PER_MACRO_STEP: f64 = 40_000.0;
/// Bytes of state per unit.
const BYTES_PER_UNIT: [(Family, usize); 3] = [
    (Family::Logistic, 24),
    (Family::Torus, 24),
    (Family::Expanding, 8),
];
const MEMORY_WARN_BYTES: f64 = 4.0 * (1u64 << 30) as f64;

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub recipe: String,
    pub config_hash: String,
    pub grid_points: usize,
    pub memory_bytes: f64,
    pub runtime_s: f64,
    pub warnings: Vec<String>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "OK")?;
        writeln!(f, "recipe: {}", self.recipe)?;
        writeln!(f, "config hash: {}", self.config_hash)?;
        writeln!(f, "grid points: {}", self.grid_points)?;
        writeln!(f, "expected memory: {}", human_bytes(self.memory_bytes))?;
        write!(f, "estimated runtime: {}", human_secs(self.runtime_s))?;
        for w in &self.warnings {
            write!(f, "\nwarning: {w}")?;
        }
        Ok(())
    }
}

fn human_bytes(b: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = b;
    let mut i = 0;
    while v >= 1024.0 && i + 1 < UNITS.len() {
        v /= 1024.0;
        i += 1;
    }
    format!("{v:.1} {}", UNITS[i])
}

fn human_secs(s: f64) -> String {
    if s < 120.0 {
        format!("{s:.1} s")
    } else if s < 7200.0 {
        format!("{:.1} min", s / 60.0)
    } else {
        format!("{:.1} h", s / 3600.0)
    }
}

fn lookup<T: Copy>(table: &[(Family, T)], f: Family) -> T {
    table
        .iter()
        .find(|(g, _)| *g == f)
        .map(|(_, v)| *v)
        .unwrap()
}

pub fn validate(path: &Path, ov: &Overrides) -> Result<Report> {
    let raw = config::load(path)?;
    let Some(recipe) = raw.experiment.clone() else {
        bail!("missing config key `experiment`");
    };
    let cfg = config::resolve(&recipe, raw, ov)?;
    check(&recipe, &cfg)
}

pub fn check(recipe: &str, c: &ExperimentConfig) -> Result<Report> {
    let threads = c
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let mut r = Report {
        recipe: recipe.to_string(),
        config_hash: config::config_hash(c)?,
        grid_points: 1,
        ..Default::default()
    };
    let e = &c.ensemble;
    let g = &c.grid;
    let positive = |v: usize, key: &str| -> Result<()> {
        if v == 0 {
            bail!("`{key}` must be positive");
        }
        Ok(())
    };
    let steps = || -> Result<(usize, usize)> {
        let (n, b) = (req(&e.n, "ensemble.N")?, e.burn_in.unwrap_or(0));
        if n <= b {
            bail!("N must exceed burn_in (N = {n}, burn_in = {b})");
        }
        Ok((n, b))
    };
    let interval = || -> Result<(f64, f64)> {
        let (lo, hi) = (
            req(&g.eps_lo, "grid.eps_lo")?,
            req(&g.eps_hi, "grid.eps_hi")?,
        );
        if !(lo < hi) {
            bail!("eps_lo must be below eps_hi");
        }
        Ok((lo, hi))
    };
    // (unit-steps, concurrent ensembles of M units)
    let mut work = (0.0f64, 0usize);
    match recipe {
        "sweep-uncoupled" | "sweep-torus" | "sweep-coupled" => {
            interval()?;
            let j = req(&g.j, "grid.J")?;
            if j < 4 {
                bail!("grid size ≥ 4 required (J = {j})");
            }
            let m = req(&e.m, "ensemble.M")?;
            positive(m, "ensemble.M")?;
            let (n, _) = steps()?;
            let reps = req(&e.realizations, "ensemble.realizations")?;
            positive(reps, "ensemble.realizations")?;
            if e.sigma_method == Some(SigmaMethod::Replications) && reps < 2 {
                bail!("sigma_method = \"replications\" needs at least 2 realizations");
            }
            r.grid_points = j;
            work = ((m * n) as f64 * (j * reps) as f64, threads.min(j * reps));
        }
        "surrogate-compare" | "multistability-search" => {
            let m = req(&e.m, "ensemble.M")?;
            positive(m, "ensemble.M")?;
            let (n, _) = steps()?;
            let reps = req(&e.realizations, "ensemble.realizations")?;
            positive(reps, "ensemble.realizations")?;
            let per = if recipe == "surrogate-compare" { 2 } else { 1 };
            work = ((m * n * per * reps) as f64, threads.min(reps));
        }
        "noisy-scan" => {
            let s = &c.scan;
            let (lo, hi, da) = (
                req(&s.a_lo, "scan.a_lo")?,
                req(&s.a_hi, "scan.a_hi")?,
                req(&s.da, "scan.da")?,
            );
            if !(lo < hi) || !(da > 0.0) {
                bail!("need a_lo < a_hi and da > 0");
            }
            if !(req(&s.sigma, "scan.sigma")? >= 0.0) {
                bail!("scan.sigma must be nonnegative");
            }
            let n = req(&e.n, "ensemble.N")?;
            r.grid_points = ((hi - lo) / da).round() as usize + 1;
            work = ((r.grid_points * n) as f64, 0);
        }
        "lrt-test" | "cheb-analyze" => {
            let input = req(&c.analysis.input, "analysis.input")?;
            if !input.exists() {
                bail!("input table {} does not exist", input.display());
            }
            if recipe == "lrt-test" && req(&c.analysis.order, "analysis.order")? == 0 {
                bail!("analysis.order must be positive");
            }
        }
        "thermo-fixed-point" | "thermo-susceptibility" | "thermo-lyapunov" => {
            let eps = req(&g.eps, "grid.eps")?;
            if !eps.is_finite() {
                bail!("grid.eps must be finite");
            }
            let macro_steps = match recipe {
                "thermo-lyapunov" => {
                    let k = req(&c.thermo.n_exp, "thermo.n_exp")?;
                    if !(1..=8).contains(&k) {
                        bail!("thermo.n_exp must lie in 1..=8");
                    }
                    steps()?.0 * (k + 2)
                }
                "thermo-fixed-point" => 200 + req(&e.n, "ensemble.N")?,
                _ => 4 * req(&c.thermo.horizon, "thermo.horizon")?,
            };
            r.runtime_s = macro_steps as f64 * NS_PER_MACRO_STEP * 1e-9;
        }
        "thermo-bifurcate" => {
            interval()?;
            let j = req(&g.j, "grid.J")?;
            positive(j, "grid.J")?;
            let (n, _) = steps()?;
            r.grid_points = j;
            r.runtime_s = (j * n) as f64 * NS_PER_MACRO_STEP * 1e-9;
        }
        _ => {}
    }
    if let Some(family) = e.family {
        if work.0 > 0.0 {
            r.runtime_s = work.0 * lookup(&NS_PER_UNIT_STEP, family) * 1e-9 / threads as f64;
        }
        if work.1 > 0 {
            r.memory_bytes = (e.m.unwrap_or(0) * lookup(&BYTES_PER_UNIT, family) * work.1) as f64;
        }
    } else if work.0 > 0.0 {
        r.runtime_s = work.0 * 20.0 * 1e-9;
    }
    if r.memory_bytes > MEMORY_WARN_BYTES {
        r.warnings.push(format!(
            "expected memory {} exceeds {}; reduce M or threads",
            human_bytes(r.memory_bytes),
            human_bytes(MEMORY_WARN_BYTES)
        ));
    }
    Ok(r)
}
