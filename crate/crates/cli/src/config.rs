//! Experiment configuration: a TOML file with a few sections, merged with
//! per-recipe defaults into a fully resolved config that is hashed for the
//! output path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use meanfield_core::ensemble::{Family, InitMeasure};
use meanfield_core::maps::ParameterDistribution;
use meanfield_core::response::SigmaMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RECIPES: [&str; 12] = [
    "sweep-uncoupled",
    "sweep-torus",
    "sweep-coupled",
    "lrt-test",
    "cheb-analyze",
    "noisy-scan",
    "thermo-fixed-point",
    "thermo-bifurcate",
    "thermo-lyapunov",
    "thermo-susceptibility",
    "surrogate-compare",
    "multistability-search",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<String>,
    pub seed: Option<u64>,
    /// Root of the artifact tree.
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    pub distribution: Option<ParameterDistribution>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub thermo: ThermoSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub family: Option<Family>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub burn_in: Option<usize>,
    pub realizations: Option<usize>,
    pub redraw: Option<bool>,
    pub shared_params: Option<bool>,
    pub sigma_method: Option<SigmaMethod>,
    pub init: Option<InitMeasure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub eps: Option<f64>,
    pub eps_lo: Option<f64>,
    pub eps_hi: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Chebyshev,
    Taylor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Response-curve table produced by a sweep recipe.
    pub input: Option<PathBuf>,
    pub basis: Option<BasisKind>,
    pub order: Option<usize>,
    /// Coefficients are trusted while they exceed this multiple of their noise.
    pub noise_factor: Option<f64>,
    pub k_min: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub a_lo: Option<f64>,
    pub a_hi: Option<f64>,
    pub da: Option<f64>,
    pub sigma: Option<f64>,
    pub half_window: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermoSection {
    pub tol: Option<f64>,
    pub horizon: Option<usize>,
    pub n_exp: Option<usize>,
    pub qr_interval: Option<usize>,
    pub truncation_order: Option<usize>,
    pub max_lag: Option<usize>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paper_scale: bool,
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    // the toml error already carries line and column
    toml::from_str(text).map_err(|e| anyhow::anyhow!("malformed config: {e}"))
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

macro_rules! merge {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )+
    };
}

fn defaults(recipe: &str) -> ExperimentConfig {
    let mut d = ExperimentConfig {
        output: Some(PathBuf::from("out")),
        ..Default::default()
    };
    let rc = ParameterDistribution::logistic_raised_cosine();
    let e = &mut d.ensemble;
    let g = &mut d.grid;
    match recipe {
        "sweep-uncoupled" | "sweep-torus" | "sweep-coupled" => {
            e.family = Some(if recipe == "sweep-torus" {
                Family::Torus
            } else {
                Family::Logistic
            });
            e.m = Some(10_000);
            e.n = Some(31_000);
            e.burn_in = Some(1_000);
            e.realizations = Some(10);
            e.redraw = Some(true);
            e.shared_params = Some(false);
            e.sigma_method = Some(SigmaMethod::Pooled);
            e.init = Some(InitMeasure::Uniform);
            g.j = Some(128);
            if recipe == "sweep-torus" {
                d.distribution = Some(ParameterDistribution::torus_raised_cosine());
                g.eps_lo = Some(0.0);
                g.eps_hi = Some(0.1);
            } else {
                d.distribution = Some(rc);
                g.eps_lo = Some(-0.2);
                g.eps_hi = Some(0.0);
            }
            if recipe == "sweep-coupled" {
                e.redraw = Some(false);
                e.sigma_method = Some(SigmaMethod::Replications);
            }
        }
        "lrt-test" => {
            d.analysis.basis = Some(BasisKind::Chebyshev);
            d.analysis.order = Some(30);
        }
        "cheb-analyze" => {
            d.analysis.noise_factor = Some(3.0);
            d.analysis.k_min = Some(1);
        }
        "noisy-scan" => {
            e.n = Some(20_000);
            d.scan = ScanSection {
                a_lo: Some(3.7),
                a_hi: Some(3.8),
                da: Some(1e-5),
                sigma: Some(1e-3),
                half_window: Some(10),
                threshold: Some(0.01),
            };
        }
        "thermo-fixed-point" => {
            g.eps = Some(15.0);
            e.n = Some(2_000);
            d.thermo.tol = Some(1e-12);
        }
        "thermo-bifurcate" => {
            g.eps_lo = Some(15.0);
            g.eps_hi = Some(30.0);
            g.j = Some(301);
            e.n = Some(2_000);
            e.burn_in = Some(1_500);
        }
        "thermo-lyapunov" => {
            g.eps = Some(30.0);
            e.n = Some(5_000);
            e.burn_in = Some(1_000);
            d.thermo.n_exp = Some(3);
            d.thermo.qr_interval = Some(5);
            d.thermo.truncation_order = Some(128);
        }
        "thermo-susceptibility" => {
            g.eps = Some(15.0);
            d.thermo.horizon = Some(300);
            d.thermo.tol = Some(1e-12);
        }
        "surrogate-compare" => {
            e.family = Some(Family::Expanding);
            e.m = Some(10_000);
            e.n = Some(101_000);
            e.burn_in = Some(1_000);
            e.realizations = Some(4);
            e.init = Some(InitMeasure::Uniform);
            g.eps = Some(15.0);
            d.thermo.max_lag = Some(50);
        }
        "multistability-search" => {
            e.family = Some(Family::Logistic);
            e.m = Some(10_000);
            e.n = Some(30_000);
            e.burn_in = Some(10_000);
            e.realizations = Some(20);
            e.init = Some(InitMeasure::RandomizedBeta);
            d.distribution = Some(ParameterDistribution::logistic_three_atoms());
            g.eps = Some(-0.1);
        }
        _ => {}
    }
    d
}

/// Full-scale sizes `(M, N, J)` for `--paper-scale`, where they apply.
fn paper_scale(recipe: &str, c: &mut ExperimentConfig) {
    let e = &mut c.ensemble;
    match recipe {
        "sweep-uncoupled" | "sweep-torus" | "sweep-coupled" => {
            e.m = Some(100_000);
            e.n = Some(100_000 + e.burn_in.unwrap_or(0));
            c.grid.j = Some(1000);
        }
        "surrogate-compare" | "multistability-search" => {
            e.m = Some(1_000_000);
            e.n = Some(100_000 + e.burn_in.unwrap_or(0));
        }
        "noisy-scan" => e.n = Some(100_000),
        "thermo-bifurcate" => c.grid.j = Some(1000),
        _ => {}
    }
}

/// Fills in defaults and command-line overrides; the seed becomes mandatory.
pub fn resolve(
    recipe: &str,
    mut cfg: ExperimentConfig,
    ov: &Overrides,
) -> Result<ExperimentConfig> {
    if !RECIPES.contains(&recipe) {
        bail!(
            "unknown recipe `{recipe}` (expected one of: {})",
            RECIPES.join(", ")
        );
    }
    if let Some(name) = &cfg.experiment {
        if name != recipe {
            bail!("config is for `{name}` but recipe `{recipe}` was requested");
        }
    }
    cfg.experiment = Some(recipe.to_string());
    if ov.seed.is_some() {
        cfg.seed = ov.seed;
    }
    if ov.threads.is_some() {
        cfg.threads = ov.threads;
    }
    if cfg.seed.is_none() {
        bail!("a seed is required (config `seed` or --seed)");
    }
    let d = defaults(recipe);
    merge!(cfg, d, output, distribution);
    merge!(
        cfg.ensemble,
        d.ensemble,
        family,
        m,
        n,
        burn_in,
        realizations,
        redraw,
        shared_params,
        sigma_method,
        init
    );
    merge!(cfg.grid, d.grid, eps, eps_lo, eps_hi, j);
    merge!(
        cfg.analysis,
        d.analysis,
        input,
        basis,
        order,
        noise_factor,
        k_min
    );
    merge!(
        cfg.scan,
        d.scan,
        a_lo,
        a_hi,
        da,
        sigma,
        half_window,
        threshold
    );
    merge!(
        cfg.thermo,
        d.thermo,
        tol,
        horizon,
        n_exp,
        qr_interval,
        truncation_order,
        max_lag
    );
    if ov.paper_scale {
        paper_scale(recipe, &mut cfg);
    }
    Ok(cfg)
}

/// Hash of everything that determines the data (not threads or paths).
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.threads = None;
    c.output = None;
    let bytes = serde_json::to_vec(&c)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

/// `Some` value or a "missing key" error.
pub fn req<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone()
        .with_context(|| format!("missing config key `{key}`"))
}
