//! Finite ensembles of microscopic maps and their macroscopic time series.
//!
//! Units are stored structure-of-arrays and advanced in fixed-size chunks.
//! Every reduction over units (mean field, observable) runs in a fixed order
//! that depends only on `M`: eight interleaved accumulators inside a chunk,
//! then a pairwise tree over chunks. Parallel execution over chunks therefore
//! never changes a bit of the output.
//!
//! The logistic doubling cocycle `r` is held as a 64-bit binary fraction.
//! Doubling is a left shift, the branch is chosen by the top bit, and every
//! 32 steps the 32 low-order bits (which the shifts have zeroed) are refilled
//! from the unit's own counter-based stream. The exposed `r` is exact to the
//! precision of an `f64`.

use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{
    self, logistic_branch, phi_expanding, phi_logistic, wrap_unit, ExpandingBranch,
    LogisticUnitState, ParameterDistribution, TorusUnitState, EXPANDING_DOMAIN_TOL,
};
use crate::rng::{derive_seed, keyed_draw, CounterRng, Purpose};

/// Units per work chunk. Reductions are defined relative to this constant.
pub const CHUNK: usize = 2048;
const LANES: usize = 8;
/// Steps per time segment when the driver is known in advance.
const SEGMENT: usize = 4096;
/// Steps between refills of the logistic cocycle's low-order bits.
pub const COCYCLE_REFILL: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Logistic,
    Expanding,
    Torus,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Logistic => "logistic",
            Family::Expanding => "expanding",
            Family::Torus => "torus",
        }
    }
}

/// Law of the initial microscopic states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitMeasure {
    /// Uniform on the unit domain.
    Uniform,
    /// Beta law mapped affinely onto the domain (first coordinate only for
    /// the torus).
    Beta { alpha: f64, beta: f64 },
    /// A Beta law whose shape parameters are themselves drawn uniformly from
    /// `[0.5, 5]` per realization, so that distinct seeds start from distinct
    /// initial distributions.
    RandomizedBeta,
}

impl InitMeasure {
    /// Concrete law for a given seed (resolves `RandomizedBeta`).
    pub fn resolve(self, seed: u64) -> InitMeasure {
        match self {
            InitMeasure::RandomizedBeta => {
                let mut rng = CounterRng::new(seed, 0, Purpose::InitLaw);
                InitMeasure::Beta {
                    alpha: 0.5 + 4.5 * rng.uniform(),
                    beta: 0.5 + 4.5 * rng.uniform(),
                }
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Uncoupled,
    Coupled,
    Driven,
}

/// Prescribed external driver `d_n`, indexed by absolute time `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSignal {
    pub values: Vec<f64>,
}

impl DriverSignal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("driver contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn constant(value: f64, len: usize) -> Self {
        Self {
            values: vec![value; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub eps: f64,
    pub driver: Option<DriverSignal>,
}

impl ScenarioConfig {
    pub fn uncoupled(eps: f64) -> Self {
        Self {
            mode: Mode::Uncoupled,
            eps,
            driver: None,
        }
    }

    pub fn coupled(eps: f64) -> Self {
        Self {
            mode: Mode::Coupled,
            eps,
            driver: None,
        }
    }

    pub fn driven(eps: f64, driver: DriverSignal) -> Self {
        Self {
            mode: Mode::Driven,
            eps,
            driver: Some(driver),
        }
    }

    fn check(&self, family: Family, start: u64, steps: usize) -> Result<()> {
        if !self.eps.is_finite() {
            return Err(Error::config("eps must be finite"));
        }
        match self.mode {
            Mode::Driven => {
                let driver = self
                    .driver
                    .as_ref()
                    .ok_or_else(|| Error::config("driven mode requires a driver"))?;
                let needed = start as usize + steps;
                if driver.values.len() < needed {
                    return Err(Error::config(format!(
                        "driver has {} values, run needs {needed}",
                        driver.values.len()
                    )));
                }
            }
            Mode::Uncoupled => {}
            Mode::Coupled => {}
        }
        if family == Family::Torus && self.mode != Mode::Uncoupled {
            return Err(Error::config(
                "the torus family has no mean field; use uncoupled mode",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Units {
    Logistic {
        q: Vec<f64>,
        r: Vec<u64>,
        /// Cocycle stream key of each unit.
        keys: Vec<u64>,
    },
    Expanding {
        q: Vec<f64>,
    },
    Torus {
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

/// Microscopic state of a whole ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    family: Family,
    units: Units,
    params: Vec<f64>,
    step_index: u64,
    rng_root: u64,
}

/// Draws a fresh ensemble. Unit `j` depends only on `(seed, j)`.
pub fn init_ensemble(
    family: Family,
    m: usize,
    dist: Option<&ParameterDistribution>,
    seed: u64,
    init: InitMeasure,
) -> Result<EnsembleState> {
    if m == 0 {
        return Err(Error::config("ensemble needs M >= 1"));
    }
    let params = match family {
        Family::Expanding => Vec::new(),
        Family::Logistic | Family::Torus => {
            let dist = dist.ok_or_else(|| {
                Error::config(format!(
                    "{} family needs a parameter distribution",
                    family.name()
                ))
            })?;
            maps::sample_parameters(dist, m, seed)?
        }
    };
    init_with_params(family, m, params, seed, init)
}

/// Like [`init_ensemble`] but with an explicit parameter multiset, e.g. to
/// hold the heat bath fixed while the perturbation varies.
pub fn init_ensemble_with_params(
    family: Family,
    params: Vec<f64>,
    seed: u64,
    init: InitMeasure,
) -> Result<EnsembleState> {
    if family == Family::Expanding {
        return Err(Error::config("the expanding family has no parameters"));
    }
    let m = params.len();
    if m == 0 {
        return Err(Error::config("ensemble needs M >= 1"));
    }
    init_with_params(family, m, params, seed, init)
}

fn init_with_params(
    family: Family,
    m: usize,
    params: Vec<f64>,
    seed: u64,
    init: InitMeasure,
) -> Result<EnsembleState> {
    let law = init.resolve(seed);
    let beta = match law {
        InitMeasure::Beta { alpha, beta } => Some(
            Beta::new(alpha, beta)
                .map_err(|e| Error::config(format!("invalid Beta({alpha}, {beta}): {e}")))?,
        ),
        _ => None,
    };
    let draw = |rng: &mut CounterRng| -> f64 {
        match &beta {
            Some(b) => b.sample(rng),
            None => rng.uniform_open(),
        }
    };
    let units = match family {
        Family::Logistic => {
            let (q, r) = (0..m)
                .map(|j| {
                    let mut rng = CounterRng::new(seed, j as u64, Purpose::InitState);
                    let q = draw(&mut rng);
                    let r = keyed_draw(derive_seed(seed, j as u64, Purpose::Cocycle), 0);
                    (q, r)
                })
                .unzip();
            let keys = (0..m)
                .map(|j| derive_seed(seed, j as u64, Purpose::Cocycle))
                .collect();
            Units::Logistic { q, r, keys }
        }
        Family::Expanding => Units::Expanding {
            q: (0..m)
                .map(|j| {
                    let mut rng = CounterRng::new(seed, j as u64, Purpose::InitState);
                    2.0 * draw(&mut rng) - 1.0
                })
                .collect(),
        },
        Family::Torus => {
            let (x, y) = (0..m)
                .map(|j| {
                    let mut rng = CounterRng::new(seed, j as u64, Purpose::InitState);
                    let x = draw(&mut rng);
                    (wrap_unit(x), rng.uniform())
                })
                .unzip();
            Units::Torus { x, y }
        }
    };
    Ok(EnsembleState {
        family,
        units,
        params,
        step_index: 0,
        rng_root: seed,
    })
}

impl EnsembleState {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        match &self.units {
            Units::Logistic { q, .. } | Units::Expanding { q } => q.len(),
            Units::Torus { x, .. } => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn seed(&self) -> u64 {
        self.rng_root
    }

    /// Primary coordinate of every unit (`q`, or `x` for the torus).
    pub fn positions(&self) -> &[f64] {
        match &self.units {
            Units::Logistic { q, .. } | Units::Expanding { q } => q,
            Units::Torus { x, .. } => x,
        }
    }

    pub fn logistic_unit(&self, j: usize) -> Option<LogisticUnitState> {
        match &self.units {
            Units::Logistic { q, r, .. } => Some(LogisticUnitState {
                q: q[j],
                r: (r[j] >> 11) as f64 * (1.0 / (1u64 << 53) as f64),
            }),
            _ => None,
        }
    }

    pub fn torus_unit(&self, j: usize) -> Option<TorusUnitState> {
        match &self.units {
            Units::Torus { x, y } => Some(TorusUnitState { x: x[j], y: y[j] }),
            _ => None,
        }
    }

    /// Overwrites unit coordinates (logistic and expanding families).
    pub fn set_positions(&mut self, values: &[f64]) -> Result<()> {
        match &mut self.units {
            Units::Logistic { q, .. } | Units::Expanding { q } if q.len() == values.len() => {
                q.copy_from_slice(values);
                Ok(())
            }
            _ => Err(Error::invalid("set_positions: family or length mismatch")),
        }
    }
}

/// Sum of `f(x)` with the ensemble's fixed reduction order.
fn chunk_sum(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0; LANES];
    let mut blocks = xs.chunks_exact(LANES);
    for block in &mut blocks {
        for l in 0..LANES {
            acc[l] += f(block[l]);
        }
    }
    let mut rem = 0.0;
    for &x in blocks.remainder() {
        rem += f(x);
    }
    fold_lanes(&acc) + rem
}

#[inline(always)]
fn fold_lanes(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Pairwise sum in a fixed tree shape.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// `Phi = (1/M) sum phi(q_j)`; `None` for the torus family.
pub fn mean_field(state: &EnsembleState) -> Option<f64> {
    let m = state.len() as f64;
    let sums: Vec<f64> = match &state.units {
        Units::Logistic { q, .. } => q
            .par_chunks(CHUNK)
            .map(|c| chunk_sum(c, phi_logistic))
            .collect(),
        Units::Expanding { q } => q
            .par_chunks(CHUNK)
            .map(|c| chunk_sum(c, phi_expanding))
            .collect(),
        Units::Torus { .. } => return None,
    };
    Some(pairwise_sum(&sums) / m)
}

/// `Psi = (1/M) sum q_j` (or `x_j` for the torus).
pub fn observable_psi(state: &EnsembleState) -> f64 {
    let xs = state.positions();
    let sums: Vec<f64> = xs.par_chunks(CHUNK).map(|c| chunk_sum(c, |x| x)).collect();
    pairwise_sum(&sums) / xs.len() as f64
}

/// Provenance stored with every time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub eps: f64,
    pub family: Family,
    pub mode: Mode,
    pub burn_in: usize,
    /// Absolute time of the first recorded entry.
    pub start_step: u64,
}

/// Recorded macroscopic series. Entry `i` belongs to the step taken at
/// absolute time `n = start_step + i`: `phi[i]` is the mean field `Phi_n` of
/// the state before the step and `psi[i]` is the observable `Psi_{n+1}` after
/// it. The torus family has no mean field and records `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub burn_in: usize,
    pub meta: SeriesMeta,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record `Phi_n` even when the dynamics does not need it.
    pub record_phi: bool,
    /// Accumulate per-unit moments of `phi(q_j)` over the recorded window and
    /// report their average variance.
    pub unit_phi_moments: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub series: TimeSeries,
    /// `<Var_t phi(q_j)>_j`, the lag-zero covariance of the CLT fluctuation.
    pub unit_phi_variance: Option<f64>,
}

/// Advances every unit by one step and returns `(Phi_n, Psi_{n+1})`, the
/// pre-step mean field and the post-step observable.
pub fn step(state: &mut EnsembleState, config: &ScenarioConfig) -> Result<(f64, f64)> {
    let out = run_with(
        state,
        config,
        1,
        0,
        RunOptions {
            record_phi: true,
            unit_phi_moments: false,
        },
    )?;
    Ok((out.series.phi[0], out.series.psi[0]))
}

/// Runs `n_total` steps and records the last `n_total - burn_in`.
pub fn run(
    state: &mut EnsembleState,
    config: &ScenarioConfig,
    n_total: usize,
    burn_in: usize,
) -> Result<TimeSeries> {
    let opts = RunOptions {
        record_phi: true,
        unit_phi_moments: false,
    };
    Ok(run_with(state, config, n_total, burn_in, opts)?.series)
}

pub fn run_with(
    state: &mut EnsembleState,
    config: &ScenarioConfig,
    n_total: usize,
    burn_in: usize,
    opts: RunOptions,
) -> Result<RunOutput> {
    if n_total == 0 || burn_in >= n_total {
        return Err(Error::config(format!(
            "need N > burn_in (N = {n_total}, burn_in = {burn_in})"
        )));
    }
    config.check(state.family, state.step_index, n_total)?;
    let m = state.len();
    let recorded = n_total - burn_in;
    let family = state.family;
    let meta = SeriesMeta {
        seed: state.rng_root,
        m,
        eps: config.eps,
        family,
        mode: config.mode,
        burn_in,
        start_step: state.step_index + burn_in as u64,
    };

    let need_phi = family != Family::Torus
        && (opts.record_phi || opts.unit_phi_moments || config.mode == Mode::Coupled);
    let mut psi = Vec::with_capacity(recorded);
    let mut phi = Vec::with_capacity(recorded);
    let mut moments = if opts.unit_phi_moments && family != Family::Torus {
        Some(vec![(0.0f64, 0.0f64); m])
    } else {
        None
    };

    // Phi_n of the current state, carried from one step to the next.
    let mut phi_now = if need_phi { mean_field(state) } else { None };
    let mut done = 0usize;
    while done < n_total {
        let seg = if config.mode == Mode::Coupled {
            1
        } else {
            SEGMENT.min(n_total - done)
        };
        let n0 = state.step_index;
        let drive: Vec<f64> = (0..seg)
            .map(|t| match config.mode {
                Mode::Uncoupled => 0.0,
                Mode::Coupled => phi_now.expect("mean field available in coupled mode"),
                Mode::Driven => config.driver.as_ref().unwrap().values[(n0 as usize) + t],
            })
            .collect();
        let record_from = burn_in.saturating_sub(done).min(seg);
        let (psi_sums, phi_sums) = advance(
            state,
            config,
            &drive,
            need_phi,
            if done + seg > burn_in {
                moments.as_mut().map(|v| (v, record_from))
            } else {
                None
            },
        )?;
        for t in 0..seg {
            let abs = done + t;
            let next_phi = phi_sums.as_ref().map(|p| p[t] / m as f64);
            if abs >= burn_in {
                psi.push(psi_sums[t] / m as f64);
                phi.push(phi_now.unwrap_or(f64::NAN));
            }
            phi_now = next_phi;
        }
        done += seg;
    }

    let unit_phi_variance = moments.map(|mom| {
        let n = recorded as f64;
        let vars: Vec<f64> = mom
            .iter()
            .map(|&(s, s2)| {
                let mean = s / n;
                (s2 / n - mean * mean).max(0.0)
            })
            .collect();
        pairwise_sum(&vars) / m as f64
    });

    Ok(RunOutput {
        series: TimeSeries {
            psi,
            phi,
            burn_in,
            meta,
        },
        unit_phi_variance,
    })
}

/// Per-step sums of psi and (optionally) phi after each step.
type StepSums = (Vec<f64>, Option<Vec<f64>>);

fn advance(
    state: &mut EnsembleState,
    config: &ScenarioConfig,
    drive: &[f64],
    need_phi: bool,
    moments: Option<(&mut Vec<(f64, f64)>, usize)>,
) -> Result<StepSums> {
    let steps = drive.len();
    let n0 = state.step_index;
    let eps = config.eps;
    let (moments, moment_from) = match moments {
        Some((v, from)) => (Some(v.as_mut_slice()), from),
        None => (None, usize::MAX),
    };

    let partials: Vec<Result<ChunkSums>> = match &mut state.units {
        Units::Logistic { q, r, keys } => {
            // uncoupled: h = 0, identical to a zero driver
            let tanh_drive: Vec<f64> = drive.iter().map(|d| d.tanh()).collect();
            let params = &state.params;
            let mut mom_chunks = split_moments(moments, q.len());
            q.par_chunks_mut(CHUNK)
                .zip(r.par_chunks_mut(CHUNK))
                .zip(params.par_chunks(CHUNK))
                .zip(keys.par_chunks(CHUNK))
                .zip(mom_chunks.par_iter_mut())
                .enumerate()
                .map(|(ci, ((((qc, rc), ac), kc), mom))| {
                    logistic_chunk(LogisticChunk {
                        q: qc,
                        r: rc,
                        a: ac,
                        keys: kc,
                        unit0: ci * CHUNK,
                        n0,
                        tanh_drive: &tanh_drive,
                        eps,
                        need_phi,
                        moments: mom.as_deref_mut(),
                        moment_from,
                    })
                })
                .collect()
        }
        Units::Expanding { q } => {
            let branches: Vec<ExpandingBranch> = drive
                .iter()
                .map(|&d| {
                    let k = match config.mode {
                        Mode::Uncoupled => (-2.0f64).tanh(),
                        _ => (eps * d - 2.0).tanh(),
                    };
                    ExpandingBranch::new(k)
                })
                .collect();
            let mut mom_chunks = split_moments(moments, q.len());
            q.par_chunks_mut(CHUNK)
                .zip(mom_chunks.par_iter_mut())
                .enumerate()
                .map(|(ci, (qc, mom))| {
                    expanding_chunk(
                        qc,
                        ci * CHUNK,
                        n0,
                        &branches,
                        need_phi,
                        mom.as_deref_mut(),
                        moment_from,
                    )
                })
                .collect()
        }
        Units::Torus { x, y } => {
            let params = &state.params;
            x.par_chunks_mut(CHUNK)
                .zip(y.par_chunks_mut(CHUNK))
                .zip(params.par_chunks(CHUNK))
                .map(|((xc, yc), ac)| Ok(torus_chunk(xc, yc, ac, steps, eps)))
                .collect()
        }
    };

    let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
    state.step_index += steps as u64;

    let mut column = vec![0.0; partials.len()];
    let psi = (0..steps)
        .map(|t| {
            for (c, p) in column.iter_mut().zip(&partials) {
                *c = p.psi[t];
            }
            pairwise_sum(&column)
        })
        .collect();
    let phi = need_phi.then(|| {
        (0..steps)
            .map(|t| {
                for (c, p) in column.iter_mut().zip(&partials) {
                    *c = p.phi[t];
                }
                pairwise_sum(&column)
            })
            .collect()
    });
    Ok((psi, phi))
}

fn split_moments(moments: Option<&mut [(f64, f64)]>, m: usize) -> Vec<Option<&mut [(f64, f64)]>> {
    let n_chunks = m.div_ceil(CHUNK);
    match moments {
        Some(all) => all.chunks_mut(CHUNK).map(Some).collect(),
        None => (0..n_chunks).map(|_| None).collect(),
    }
}

struct ChunkSums {
    psi: Vec<f64>,
    phi: Vec<f64>,
}

struct LogisticChunk<'a> {
    q: &'a mut [f64],
    r: &'a mut [u64],
    a: &'a [f64],
    keys: &'a [u64],
    unit0: usize,
    n0: u64,
    tanh_drive: &'a [f64],
    eps: f64,
    need_phi: bool,
    moments: Option<&'a mut [(f64, f64)]>,
    moment_from: usize,
}

fn logistic_chunk(c: LogisticChunk<'_>) -> Result<ChunkSums> {
    let LogisticChunk {
        q,
        r,
        a,
        keys,
        unit0,
        n0,
        tanh_drive,
        eps,
        need_phi,
        mut moments,
        moment_from,
    } = c;
    let steps = tanh_drive.len();
    let mut psi = Vec::with_capacity(steps);
    let mut phi = Vec::with_capacity(if need_phi { steps } else { 0 });

    for (t, &th) in tanh_drive.iter().enumerate() {
        let n = n0 + t as u64;
        if n > 0 && n % COCYCLE_REFILL == 0 {
            let block = n / COCYCLE_REFILL;
            for (bits, &key) in r.iter_mut().zip(keys) {
                *bits |= keyed_draw(key, block) >> 32;
            }
        }

        let sweep = logistic_sweep(q, r, a, th, eps, need_phi);
        psi.push(sweep.psi);
        if need_phi {
            phi.push(sweep.phi);
        }
        if sweep.out_of_domain {
            let (j, &v) = q
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
                .expect("out-of-domain unit exists");
            return Err(Error::StepFault {
                family: "logistic",
                value: v,
                unit: None,
                step: None,
            }
            .at_unit(unit0 + j, n));
        }
        if t >= moment_from {
            if let Some(mom) = moments.as_deref_mut() {
                for (m, &x) in mom.iter_mut().zip(q.iter()) {
                    let v = phi_logistic(x);
                    m.0 += v;
                    m.1 += v * v;
                }
            }
        }
    }
    Ok(ChunkSums { psi, phi })
}

struct Sweep {
    psi: f64,
    phi: f64,
    out_of_domain: bool,
}

/// One step of every unit in a chunk: branch by the cocycle's top bit, shift
/// the cocycle, and sum `q` and `phi(q)` in the fixed reduction order.
#[inline(always)]
fn logistic_sweep_body<const PHI: bool>(
    q: &mut [f64],
    r: &mut [u64],
    a: &[f64],
    th: f64,
    eps: f64,
) -> Sweep {
    let split = q.len() - q.len() % LANES;
    let mut acc = [0.0; LANES];
    let mut acc_phi = [0.0; LANES];
    let mut bad = [0u64; LANES];
    let (qh, qt) = q.split_at_mut(split);
    let (rh, rt) = r.split_at_mut(split);
    let (ah, at) = a.split_at(split);
    for ((qb, rb), ab) in qh
        .chunks_exact_mut(LANES)
        .zip(rh.chunks_exact_mut(LANES))
        .zip(ah.chunks_exact(LANES))
    {
        for l in 0..LANES {
            let x = qb[l];
            let bits = rb[l];
            let f = logistic_branch(x, ab[l], th, eps);
            let mask = ((bits as i64) >> 63) as u64;
            let nx = f64::from_bits((f.to_bits() & mask) | (x.to_bits() & !mask));
            qb[l] = nx;
            rb[l] = bits << 1;
            bad[l] |= (!((nx >= 0.0) & (nx <= 1.0))) as u64;
            acc[l] += nx;
            if PHI {
                acc_phi[l] += phi_logistic(nx);
            }
        }
    }
    let mut rem = 0.0;
    let mut rem_phi = 0.0;
    let mut rem_bad = false;
    for ((x, bits), &aj) in qt.iter_mut().zip(rt.iter_mut()).zip(at) {
        let f = logistic_branch(*x, aj, th, eps);
        let nx = if *bits >> 63 == 1 { f } else { *x };
        *x = nx;
        *bits <<= 1;
        rem_bad |= !(0.0..=1.0).contains(&nx);
        rem += nx;
        if PHI {
            rem_phi += phi_logistic(nx);
        }
    }
    Sweep {
        psi: fold_lanes(&acc) + rem,
        phi: if PHI {
            fold_lanes(&acc_phi) + rem_phi
        } else {
            0.0
        },
        out_of_domain: rem_bad || bad.iter().any(|&b| b != 0),
    }
}

fn logistic_sweep_portable(
    q: &mut [f64],
    r: &mut [u64],
    a: &[f64],
    th: f64,
    eps: f64,
    phi: bool,
) -> Sweep {
    if phi {
        logistic_sweep_body::<true>(q, r, a, th, eps)
    } else {
        logistic_sweep_body::<false>(q, r, a, th, eps)
    }
}

// Wider vectors only; no fused multiply-add, so results are bit-identical to
// the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn logistic_sweep_avx2(
    q: &mut [f64],
    r: &mut [u64],
    a: &[f64],
    th: f64,
    eps: f64,
    phi: bool,
) -> Sweep {
    if phi {
        logistic_sweep_body::<true>(q, r, a, th, eps)
    } else {
        logistic_sweep_body::<false>(q, r, a, th, eps)
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn logistic_sweep_avx512(
    q: &mut [f64],
    r: &mut [u64],
    a: &[f64],
    th: f64,
    eps: f64,
    phi: bool,
) -> Sweep {
    if phi {
        logistic_sweep_body::<true>(q, r, a, th, eps)
    } else {
        logistic_sweep_body::<false>(q, r, a, th, eps)
    }
}

fn logistic_sweep(q: &mut [f64], r: &mut [u64], a: &[f64], th: f64, eps: f64, phi: bool) -> Sweep {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { logistic_sweep_avx512(q, r, a, th, eps, phi) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { logistic_sweep_avx2(q, r, a, th, eps, phi) };
        }
    }
    logistic_sweep_portable(q, r, a, th, eps, phi)
}

fn expanding_chunk(
    q: &mut [f64],
    unit0: usize,
    n0: u64,
    branches: &[ExpandingBranch],
    need_phi: bool,
    mut moments: Option<&mut [(f64, f64)]>,
    moment_from: usize,
) -> Result<ChunkSums> {
    let steps = branches.len();
    let mut psi = Vec::with_capacity(steps);
    let mut phi = Vec::with_capacity(if need_phi { steps } else { 0 });
    for (t, g) in branches.iter().enumerate() {
        let sweep = expanding_sweep(q, g);
        if sweep.out_of_domain {
            let (j, &v) = q
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.abs() <= 1.0))
                .expect("out-of-domain unit exists");
            return Err(Error::StepFault {
                family: "expanding",
                value: v,
                unit: None,
                step: None,
            }
            .at_unit(unit0 + j, n0 + t as u64));
        }
        psi.push(sweep.psi);
        if need_phi {
            phi.push(sweep.phi);
        }
        if t >= moment_from {
            if let Some(mom) = moments.as_deref_mut() {
                for (m, &x) in mom.iter_mut().zip(q.iter()) {
                    let v = phi_expanding(x);
                    m.0 += v;
                    m.1 += v * v;
                }
            }
        }
    }
    Ok(ChunkSums { psi, phi })
}

#[inline(always)]
fn expanding_unit(x: f64, g: &ExpandingBranch) -> (f64, bool) {
    let nx = g.eval(maps::doubling(x));
    let within = nx.abs() <= 1.0 + EXPANDING_DOMAIN_TOL;
    // round-off excursions are clamped; real faults stay visible
    let nx = if within { nx.clamp(-1.0, 1.0) } else { nx };
    (nx, !within)
}

#[inline(always)]
fn expanding_sweep_body(q: &mut [f64], g: &ExpandingBranch) -> Sweep {
    let split = q.len() - q.len() % LANES;
    let mut acc = [0.0; LANES];
    let mut acc_phi = [0.0; LANES];
    let mut bad = [0u64; LANES];
    let (qh, qt) = q.split_at_mut(split);
    for qb in qh.chunks_exact_mut(LANES) {
        for l in 0..LANES {
            let (nx, b) = expanding_unit(qb[l], g);
            qb[l] = nx;
            bad[l] |= b as u64;
            acc[l] += nx;
            acc_phi[l] += phi_expanding(nx);
        }
    }
    let mut rem = 0.0;
    let mut rem_phi = 0.0;
    let mut rem_bad = false;
    for x in qt.iter_mut() {
        let (nx, b) = expanding_unit(*x, g);
        *x = nx;
        rem_bad |= b;
        rem += nx;
        rem_phi += phi_expanding(nx);
    }
    Sweep {
        psi: fold_lanes(&acc) + rem,
        phi: fold_lanes(&acc_phi) + rem_phi,
        out_of_domain: rem_bad || bad.iter().any(|&b| b != 0),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn expanding_sweep_avx2(q: &mut [f64], g: &ExpandingBranch) -> Sweep {
    expanding_sweep_body(q, g)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn expanding_sweep_avx512(q: &mut [f64], g: &ExpandingBranch) -> Sweep {
    expanding_sweep_body(q, g)
}

fn expanding_sweep(q: &mut [f64], g: &ExpandingBranch) -> Sweep {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { expanding_sweep_avx512(q, g) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { expanding_sweep_avx2(q, g) };
        }
    }
    expanding_sweep_body(q, g)
}

fn torus_chunk(x: &mut [f64], y: &mut [f64], a: &[f64], steps: usize, eps: f64) -> ChunkSums {
    let mut psi = Vec::with_capacity(steps);
    for _ in 0..steps {
        for ((xj, yj), &aj) in x.iter_mut().zip(y.iter_mut()).zip(a) {
            let s = maps::step_torus(TorusUnitState { x: *xj, y: *yj }, aj, eps);
            *xj = s.x;
            *yj = s.y;
        }
        psi.push(chunk_sum(x, |v| v));
    }
    ChunkSums {
        psi,
        phi: Vec::new(),
    }
}
