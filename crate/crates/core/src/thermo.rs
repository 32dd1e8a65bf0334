//! Infinite-ensemble limit of the uniformly expanding family.
//!
//! Densities on `[-1, 1]` are Chebyshev series. The transfer operator of
//! `q -> g_K(T(q))` is applied by collocation at Chebyshev roots:
//!
//! ```text
//! (L_K rho)(y) = [rho((u + 1) / 2) + rho((u - 1) / 2)] / (2 g_K'(u)),  u = g_K^{-1}(y)
//! ```
//!
//! and the macroscopic recurrence is `rho_{n+1} = L_{K_n} rho_n` with
//! `K_n = tanh(eps Phi(rho_n) - 2)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::chebyshev::{self, RootsTransform};
use crate::error::{Error, Result};
use crate::maps::{ExpandingBranch, PHI_EXPANDING_CHEB};
use crate::stats::{self, AutocovarianceEstimate};

/// First order tried by the adaptive transform.
pub const ORDER_START: usize = 32;
/// Largest order the adaptive transform may reach.
pub const ORDER_CAP: usize = 4096;
/// Relative size of the trailing coefficients at which a series is resolved.
pub const TAIL_TOL: f64 = 1e-13;
/// Largest tolerated deviation of the mass renormalization factor from 1.
pub const MASS_TOL: f64 = 1e-8;
/// Default frozen order for tangent dynamics.
pub const DEFAULT_TANGENT_ORDER: usize = 256;

/// Range of the coupling function on `[-1, 1]`.
pub const PHI_MIN: f64 = -23.0 / 30.0;
pub const PHI_MAX: f64 = -23.0 / 30.0 + 3.5 * 0.875 - 2.0 * 0.875 * 0.875;

/// `K = tanh(eps d - 2)`.
#[inline]
pub fn k_of(eps: f64, d: f64) -> f64 {
    (eps * d - 2.0).tanh()
}

/// Chebyshev coefficients of a density (or signed measure) on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRep {
    pub coeffs: Vec<f64>,
}

impl DensityRep {
    /// Lebesgue probability density `1/2`.
    pub fn uniform() -> Self {
        Self { coeffs: vec![0.5] }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("density needs finite coefficients"));
        }
        Ok(Self { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// `int rho`.
    pub fn mass(&self) -> f64 {
        chebyshev::integral(&self.coeffs)
    }

    pub fn eval(&self, x: f64) -> f64 {
        chebyshev::clenshaw(&self.coeffs, x)
    }

    /// `Phi = int phi rho`.
    pub fn phi(&self) -> f64 {
        phi_of(&self.coeffs)
    }

    /// Truncated or zero-padded to `n` coefficients.
    pub fn resized(&self, n: usize) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(n, 0.0);
        Self { coeffs }
    }

    fn renormalized(mut self) -> Result<(Self, f64)> {
        let factor = 1.0 / self.mass();
        if !((factor - 1.0).abs() <= MASS_TOL) {
            return Err(Error::MassDrift { factor });
        }
        for c in &mut self.coeffs {
            *c *= factor;
        }
        Ok((self, factor))
    }
}

#[inline]
fn phi_of(coeffs: &[f64]) -> f64 {
    chebyshev::product_integral(coeffs, &PHI_EXPANDING_CHEB)
}

/// `g_K^{-1}(y)`: closed-form start, then safeguarded Newton on `g_K(u) = y`
/// within the bracket `[-1, 1]`.
pub fn invert_branch(g: &ExpandingBranch, y: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&y) {
        return Err(Error::BranchInversion {
            y,
            reason: "target outside [-1, 1]".into(),
        });
    }
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut u = (y + g.k * ((0.97 * y * y + 0.03).sqrt() - 1.0)).clamp(-1.0, 1.0);
    for _ in 0..100 {
        let r = g.eval(u) - y;
        if r.abs() <= 1e-14 {
            return Ok(u);
        }
        if r > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let d = g.derivative(u);
        if !(d > 0.0) {
            return Err(Error::BranchInversion {
                y,
                reason: format!("non-monotone branch (g' = {d} at u = {u})"),
            });
        }
        let next = u - r / d;
        u = if next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON {
            return Ok(u);
        }
    }
    Err(Error::BranchInversion {
        y,
        reason: "no convergence within 100 iterations".into(),
    })
}

/// Collocation data for one truncation order.
struct Collocation {
    nodes: Vec<f64>,
    dct: RootsTransform,
}

thread_local! {
    static COLLOCATION: RefCell<HashMap<usize, Rc<Collocation>>> = RefCell::new(HashMap::new());
}

fn collocation(n: usize) -> Rc<Collocation> {
    COLLOCATION.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                Rc::new(Collocation {
                    nodes: chebyshev::roots(n),
                    dct: RootsTransform::new(n),
                })
            })
            .clone()
    })
}

/// Preimage data of the collocation nodes for one `K`.
struct Preimages {
    right: Vec<f64>,
    left: Vec<f64>,
    weight: Vec<f64>,
}

fn preimages(nodes: &[f64], k: f64) -> Result<Preimages> {
    if !(k.abs() < 1.0) {
        return Err(Error::invalid(format!("|K| must be < 1, got {k}")));
    }
    let g = ExpandingBranch::new(k);
    let mut p = Preimages {
        right: Vec::with_capacity(nodes.len()),
        left: Vec::with_capacity(nodes.len()),
        weight: Vec::with_capacity(nodes.len()),
    };
    for &y in nodes {
        let u = invert_branch(&g, y)?;
        p.right.push(0.5 * (u + 1.0));
        p.left.push(0.5 * (u - 1.0));
        p.weight.push(0.5 / g.derivative(u));
    }
    Ok(p)
}

/// `L_K` applied to a series, resampled at order `n` (no renormalization).
pub fn transfer_fixed(coeffs: &[f64], k: f64, n: usize) -> Result<Vec<f64>> {
    let col = collocation(n);
    let pre = preimages(&col.nodes, k)?;
    Ok(apply_with(&col, &pre, coeffs))
}

fn apply_with(col: &Collocation, pre: &Preimages, coeffs: &[f64]) -> Vec<f64> {
    let values: Vec<f64> = (0..col.nodes.len())
        .map(|i| {
            pre.weight[i]
                * (chebyshev::clenshaw(coeffs, pre.right[i])
                    + chebyshev::clenshaw(coeffs, pre.left[i]))
        })
        .collect();
    col.dct.coefficients(&values)
}

/// Output of one adaptive transfer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferStep {
    pub rho: DensityRep,
    /// Factor applied to restore unit mass.
    pub renorm: f64,
}

fn resolved(c: &[f64]) -> (bool, f64) {
    let peak = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = c.len();
    let tail = c[n - 1].abs().max(c[n - 2].abs());
    (
        tail <= TAIL_TOL * peak,
        if peak > 0.0 { tail / peak } else { 0.0 },
    )
}

fn trim(mut c: Vec<f64>) -> Vec<f64> {
    let peak = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    while c.len() > 2
        && c[c.len() - 1].abs() <= TAIL_TOL * peak
        && c[c.len() - 2].abs() <= TAIL_TOL * peak
    {
        c.pop();
    }
    c
}

/// Pushforward `L_K rho` with adaptive order (doubling from the input order
/// until the tail is resolved) and mass renormalization.
pub fn transfer_step(rho: &DensityRep, k: f64) -> Result<TransferStep> {
    let mut n = ORDER_START.max(rho.order().next_power_of_two());
    loop {
        let c = transfer_fixed(&rho.coeffs, k, n)?;
        let (ok, tail) = resolved(&c);
        if ok {
            let (rho, renorm) = DensityRep { coeffs: trim(c) }.renormalized()?;
            return Ok(TransferStep { rho, renorm });
        }
        n *= 2;
        if n > ORDER_CAP {
            return Err(Error::OrderExplosion {
                cap: ORDER_CAP,
                tail,
            });
        }
    }
}

/// One step of the closed recurrence. Returns the new density and its mean
/// field. `driver_override` replaces `Phi(rho)` in `K`.
pub fn macro_step(
    rho: &DensityRep,
    eps: f64,
    driver_override: Option<f64>,
) -> Result<(DensityRep, f64)> {
    let d = driver_override.unwrap_or_else(|| rho.phi());
    let next = transfer_step(rho, k_of(eps, d))?.rho;
    let phi = next.phi();
    Ok((next, phi))
}

/// `phi[n] = Phi(rho_n)` and `k[n] = tanh(eps d_n - 2)` for `n < N`, where
/// `d_n` is `Phi(rho_n)` plus any noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroTrajectory {
    pub eps: f64,
    pub phi: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    /// `rho_N`.
    pub final_density: DensityRep,
}

pub fn run_macro(eps: f64, n: usize, init: &DensityRep) -> Result<MacroTrajectory> {
    run_macro_with(eps, n, init, |_| 0.0)
}

fn run_macro_with(
    eps: f64,
    n: usize,
    init: &DensityRep,
    noise: impl Fn(usize) -> f64,
) -> Result<MacroTrajectory> {
    if !eps.is_finite() {
        return Err(Error::config("eps must be finite"));
    }
    let mut rho = init.clone();
    let mut phi = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    for t in 0..n {
        let p = rho.phi();
        let k = k_of(eps, p + noise(t));
        phi.push(p);
        ks.push(k);
        rho = transfer_step(&rho, k)?.rho;
    }
    Ok(MacroTrajectory {
        eps,
        phi,
        k: ks,
        final_density: rho,
    })
}

/// Closed recurrence driven by `Phi_n + zeta_n / sqrt(M)` with Gaussian
/// `zeta` of autocovariance `acv`. `m_eff = None` is the noise-free run.
pub fn run_macro_noisy(
    eps: f64,
    n: usize,
    m_eff: Option<f64>,
    acv: &AutocovarianceEstimate,
    seed: u64,
    init: &DensityRep,
) -> Result<MacroTrajectory> {
    run_macro_noisy_signed(eps, n, m_eff, acv, seed, init, 1.0)
}

/// The pair of runs driven by `+zeta` and `-zeta`. Their average cancels
/// the part of the response that is odd in the noise.
pub fn run_macro_noisy_antithetic(
    eps: f64,
    n: usize,
    m_eff: f64,
    acv: &AutocovarianceEstimate,
    seed: u64,
    init: &DensityRep,
) -> Result<(MacroTrajectory, MacroTrajectory)> {
    Ok((
        run_macro_noisy_signed(eps, n, Some(m_eff), acv, seed, init, 1.0)?,
        run_macro_noisy_signed(eps, n, Some(m_eff), acv, seed, init, -1.0)?,
    ))
}

fn run_macro_noisy_signed(
    eps: f64,
    n: usize,
    m_eff: Option<f64>,
    acv: &AutocovarianceEstimate,
    seed: u64,
    init: &DensityRep,
    sign: f64,
) -> Result<MacroTrajectory> {
    match m_eff {
        None => run_macro(eps, n, init),
        Some(m) if m > 0.0 => {
            let zeta = stats::synthesize_noise(acv, n, seed)?;
            let scale = sign / m.sqrt();
            run_macro_with(eps, n, init, |t| scale * zeta[t])
        }
        Some(m) => Err(Error::config(format!("M_eff must be positive, got {m}"))),
    }
}

/// `L_K` at a frozen order as a dense matrix on coefficient space.
pub struct TransferMatrix {
    pub k: f64,
    mat: DMatrix<f64>,
}

impl TransferMatrix {
    pub fn new(k: f64, n: usize) -> Result<Self> {
        let col = collocation(n);
        let pre = preimages(&col.nodes, k)?;
        let mut mat = DMatrix::zeros(n, n);
        // T_j at both preimages, advanced one degree per column
        let mut cur_a = vec![1.0; n];
        let mut cur_b = vec![1.0; n];
        let mut prev_a = pre.right.clone();
        let mut prev_b = pre.left.clone();
        let mut values = vec![0.0; n];
        for j in 0..n {
            if j > 0 {
                for i in 0..n {
                    let (a, b) = (pre.right[i], pre.left[i]);
                    let na = if j == 1 {
                        a
                    } else {
                        2.0 * a * cur_a[i] - prev_a[i]
                    };
                    let nb = if j == 1 {
                        b
                    } else {
                        2.0 * b * cur_b[i] - prev_b[i]
                    };
                    prev_a[i] = cur_a[i];
                    prev_b[i] = cur_b[i];
                    cur_a[i] = na;
                    cur_b[i] = nb;
                }
            }
            for i in 0..n {
                values[i] = pre.weight[i] * (cur_a[i] + cur_b[i]);
            }
            mat.set_column(j, &DVector::from_vec(col.dct.coefficients(&values)));
        }
        Ok(Self { k, mat })
    }

    pub fn order(&self) -> usize {
        self.mat.nrows()
    }

    /// Applies the operator; the input is truncated or zero-padded.
    pub fn apply(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.order();
        let mut v = DVector::zeros(n);
        for (x, c) in v.iter_mut().zip(coeffs) {
            *x = *c;
        }
        (&self.mat * v).as_slice().to_vec()
    }

    /// Unit-mass fixed vector, from `(L - I) c = 0` with the first equation
    /// replaced by the mass constraint.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let n = self.order();
        let mut a = &self.mat - DMatrix::identity(n, n);
        for j in 0..n {
            a[(0, j)] = chebyshev::integral_tm(j);
        }
        let mut rhs = DVector::zeros(n);
        rhs[0] = 1.0;
        a.lu()
            .solve(&rhs)
            .map(|c| c.as_slice().to_vec())
            .ok_or(Error::RankDeficient {
                rank: n - 1,
                cols: n,
            })
    }
}

/// Refinement sweeps allowed after the direct solve.
const REFINE_MAX_ITER: usize = 200;

/// Stationary density of `L_K`. The order doubles from [`ORDER_START`]
/// until the tail is resolved; the fixed vector of the frozen operator is
/// found directly and polished by power iteration until one application
/// changes no coefficient by more than `tol`.
pub fn invariant_density(k: f64, tol: f64) -> Result<DensityRep> {
    Ok(invariant_with_matrix(k, tol)?.0)
}

fn invariant_with_matrix(k: f64, tol: f64) -> Result<(DensityRep, TransferMatrix)> {
    let tol = tol.max(1e-15);
    let mut n = ORDER_START;
    loop {
        let op = TransferMatrix::new(k, n)?;
        let mut c = op.stationary()?;
        let (ok, tail) = resolved(&c);
        if ok {
            let mut diff = f64::INFINITY;
            for _ in 0..REFINE_MAX_ITER {
                let (next, _) = DensityRep {
                    coeffs: op.apply(&c),
                }
                .renormalized()?;
                diff = max_diff(&next.coeffs, &c);
                c = next.coeffs;
                if diff <= tol {
                    return Ok((DensityRep { coeffs: trim(c) }, op));
                }
            }
            return Err(Error::NoConvergence {
                iterations: REFINE_MAX_ITER,
                last: phi_of(&c),
                residual: diff,
            });
        }
        n *= 2;
        if n > ORDER_CAP {
            return Err(Error::OrderExplosion {
                cap: ORDER_CAP,
                tail,
            });
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Subtracts the multiple of `rho` (unit mass) that carries the mass of `v`;
/// otherwise rounding mass would be propagated onto the stationary state.
fn remove_mass(v: &mut [f64], rho: &[f64]) {
    let m = chebyshev::integral(v);
    for (x, r) in v.iter_mut().zip(rho) {
        *x -= m * r;
    }
}

/// Frozen operator at `K` with room to spare over the resolved order of its
/// stationary density.
fn frozen_operator(k: f64) -> Result<(DensityRep, TransferMatrix)> {
    let (rho, op) = invariant_with_matrix(k, 1e-15)?;
    let n = (2 * rho.order())
        .next_power_of_two()
        .clamp(ORDER_START, ORDER_CAP);
    if n == op.order() {
        Ok((rho, op))
    } else {
        Ok((rho, TransferMatrix::new(k, n)?))
    }
}

/// Open-loop map `F(d; eps) = Phi` of the stationary density at
/// `K = tanh(eps d - 2)`.
pub fn open_loop_phi(eps: f64, d: f64, tol: f64) -> Result<f64> {
    Ok(invariant_density(k_of(eps, d), tol)?.phi())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointRoot {
    pub phi_bar: f64,
    pub residual: f64,
    pub stable: bool,
    pub r_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub eps: f64,
    pub phi_bar: f64,
    pub density: DensityRep,
    pub residual: f64,
    pub stable: bool,
    pub r_at_1: f64,
    /// Every root found, ascending; more than one means multistability.
    pub all_roots: Vec<FixedPointRoot>,
}

/// Bracketing grid for the fixed-point scan.
const SCAN_POINTS: usize = 48;
const SECANT_MAX_ITER: usize = 200;
/// Susceptibility horizon used for stability certificates.
pub const STABILITY_HORIZON: usize = 300;

/// Solves `Phi = F(Phi; eps)`. All sign changes of `F(d) - d` on the range of
/// the coupling function are refined by a damped (Illinois) secant iteration.
/// The reported root is the one closest to the time average of a short
/// macroscopic run from the uniform density.
pub fn solve_fixed_point(eps: f64, tol: f64) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    let inner = tol / 10.0;
    let h = |d: f64| -> Result<f64> { Ok(open_loop_phi(eps, d, inner)? - d) };
    let (lo, hi) = scan_range(eps);
    let grid: Vec<f64> = (0..SCAN_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&d| h(d)).collect::<Result<_>>()?;
    let mut roots = Vec::new();
    for i in 0..SCAN_POINTS - 1 {
        let (a, b) = (grid[i], grid[i + 1]);
        let (fa, fb) = (values[i], values[i + 1]);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            roots.push(illinois(&h, a, b, fa, fb, tol)?);
        }
    }
    if values[SCAN_POINTS - 1] == 0.0 {
        roots.push(grid[SCAN_POINTS - 1]);
    }
    if roots.is_empty() {
        return Err(Error::NoConvergence {
            iterations: SCAN_POINTS,
            last: f64::NAN,
            residual: f64::NAN,
        });
    }
    let mut all_roots = Vec::with_capacity(roots.len());
    for &r in &roots {
        let chi = susceptibility(eps, r, STABILITY_HORIZON)?;
        all_roots.push(FixedPointRoot {
            phi_bar: r,
            residual: h(r)?.abs(),
            stable: chi.stable(),
            r_at_1: chi.r_of_one,
        });
    }
    let primary = if all_roots.len() == 1 {
        0
    } else {
        let traj = run_macro(eps, 2000, &DensityRep::uniform())?;
        let tail = &traj.phi[1000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        (0..all_roots.len())
            .min_by(|&i, &j| {
                (all_roots[i].phi_bar - mean)
                    .abs()
                    .total_cmp(&(all_roots[j].phi_bar - mean).abs())
            })
            .unwrap()
    };
    let best = all_roots[primary].clone();
    Ok(FixedPointResult {
        eps,
        phi_bar: best.phi_bar,
        density: invariant_density(k_of(eps, best.phi_bar), inner)?,
        residual: best.residual,
        stable: best.stable,
        r_at_1: best.r_at_1,
        all_roots,
    })
}

/// Largest `|eps d - 2|` visited by the root scan. Beyond it `K` is within
/// `1e-15` of `+-1` and `F` has saturated.
const SCAN_ARG_MAX: f64 = 18.0;

fn scan_range(eps: f64) -> (f64, f64) {
    if eps == 0.0 {
        return (PHI_MIN, PHI_MAX);
    }
    let a = (2.0 - SCAN_ARG_MAX) / eps;
    let b = (2.0 + SCAN_ARG_MAX) / eps;
    (PHI_MIN.max(a.min(b)), PHI_MAX.min(a.max(b)))
}

fn illinois(
    f: &impl Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    tol: f64,
) -> Result<f64> {
    let mut side = 0i8;
    let mut c = a;
    let mut fc = fa;
    for _ in 0..SECANT_MAX_ITER {
        c = (a * fb - b * fa) / (fb - fa);
        fc = f(c)?;
        if fc.abs() <= tol || (b - a).abs() <= tol * 1e-3 {
            return Ok(c);
        }
        if fc * fb > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::NoConvergence {
        iterations: SECANT_MAX_ITER,
        last: c,
        residual: fc.abs(),
    })
}

/// Impulse response of the mean field of the open-loop (driven) system at a
/// fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilitySeries {
    pub eps: f64,
    pub phi_bar: f64,
    /// `chi[k - 1]` is `chi_k`, `k = 1..=horizon`.
    pub chi: Vec<f64>,
    /// `R(1) = sum chi_k` over the horizon.
    pub r_of_one: f64,
    /// Geometric-tail estimate of the truncated remainder of `R(1)`.
    pub tail_bound: f64,
    /// Fitted geometric decay ratio of `|chi_k|`.
    pub decay_ratio: f64,
    pub decaying: bool,
    /// Zeros of `1 - R(z)` inside the unit circle (argument principle).
    pub winding: i64,
    /// `min |1 - R(z)|` on the unit circle.
    pub margin: f64,
}

impl SusceptibilitySeries {
    pub fn r_at(&self, z: Complex<f64>) -> Complex<f64> {
        let mut acc = Complex::new(0.0, 0.0);
        for c in self.chi.iter().rev() {
            acc = (acc + c) * z;
        }
        acc
    }

    /// No root of `1 - R(z)` in the closed unit disk.
    pub fn stable(&self) -> bool {
        self.decaying && self.winding == 0 && self.margin > 1e-9
    }
}

/// Driver perturbation used for the impulse response.
pub const IMPULSE_THETA: f64 = 1e-6;
const CONTOUR_NODES: usize = 1024;

/// Response `(Phi_k^{+theta} - Phi_k) / theta`, `k = 1..=horizon`, of the
/// driven system started at the stationary density of `phi_bar`, after a
/// single driver kick `phi_bar + theta`.
pub fn impulse_response(eps: f64, phi_bar: f64, theta: f64, horizon: usize) -> Result<Vec<f64>> {
    let (rho, op) = frozen_operator(k_of(eps, phi_bar))?;
    let kicked = TransferMatrix::new(k_of(eps, phi_bar + theta), op.order())?;
    let mut base = op.apply(&rho.coeffs);
    let mut pert = kicked.apply(&rho.coeffs);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        out.push((phi_of(&pert) - phi_of(&base)) / theta);
        base = op.apply(&base);
        pert = op.apply(&pert);
    }
    Ok(out)
}

/// `chi_k` by a central difference in the kick, propagated linearly.
pub fn susceptibility(eps: f64, phi_bar: f64, horizon: usize) -> Result<SusceptibilitySeries> {
    if horizon < 8 {
        return Err(Error::config("susceptibility horizon must be >= 8"));
    }
    let (rho, op) = frozen_operator(k_of(eps, phi_bar))?;
    let n = op.order();
    let theta = IMPULSE_THETA;
    let plus = TransferMatrix::new(k_of(eps, phi_bar + theta), n)?.apply(&rho.coeffs);
    let minus = TransferMatrix::new(k_of(eps, phi_bar - theta), n)?.apply(&rho.coeffs);
    let mut delta: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * theta))
        .collect();
    remove_mass(&mut delta, &rho.coeffs);
    let mut chi = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        chi.push(phi_of(&delta));
        delta = op.apply(&delta);
    }
    Ok(summarize_chi(eps, phi_bar, chi))
}

fn summarize_chi(eps: f64, phi_bar: f64, chi: Vec<f64>) -> SusceptibilitySeries {
    let r_of_one = chi.iter().sum();
    let peak = chi.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    // geometric fit on the part of the tail that is above rounding noise
    let floor = peak * 1e-11;
    let pts: Vec<(f64, f64)> = chi
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > floor && c.abs() > 0.0)
        .map(|(k, c)| ((k + 1) as f64, c.abs().ln()))
        .collect();
    let (decay_ratio, tail_bound, decaying) = if peak == 0.0 {
        (0.0, 0.0, true)
    } else if pts.len() < 4 || pts.last().unwrap().0 < chi.len() as f64 * 0.5 {
        // decayed into rounding noise well within the horizon
        (0.0, floor, true)
    } else {
        let tail = &pts[pts.len() / 2..];
        let x: Vec<f64> = tail.iter().map(|p| p.0).collect();
        let y: Vec<f64> = tail.iter().map(|p| p.1).collect();
        let r = stats::linear_slope(&x, &y).exp();
        let last = chi.last().unwrap().abs();
        if r < 1.0 {
            (r, last * r / (1.0 - r), true)
        } else {
            (r, f64::INFINITY, false)
        }
    };
    let (winding, margin) = contour_winding(&chi);
    SusceptibilitySeries {
        eps,
        phi_bar,
        chi,
        r_of_one,
        tail_bound,
        decay_ratio,
        decaying,
        winding,
        margin,
    }
}

/// Winding number of `1 - R(z)` around 0 on `|z| = 1`, and `min |1 - R|`.
fn contour_winding(chi: &[f64]) -> (i64, f64) {
    let values: Vec<Complex<f64>> = (0..CONTOUR_NODES)
        .map(|j| {
            let z = Complex::from_polar(1.0, 2.0 * PI * j as f64 / CONTOUR_NODES as f64);
            let mut acc = Complex::new(0.0, 0.0);
            for c in chi.iter().rev() {
                acc = (acc + c) * z;
            }
            Complex::new(1.0, 0.0) - acc
        })
        .collect();
    let margin = values
        .iter()
        .map(|v| v.norm())
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for j in 0..CONTOUR_NODES {
        let a = values[j];
        let b = values[(j + 1) % CONTOUR_NODES];
        total += (b / a).arg();
    }
    ((total / (2.0 * PI)).round() as i64, margin)
}

/// `dF/deps` at fixed driver `d = phi_bar`, by central differences.
pub fn df_deps(eps: f64, phi_bar: f64, delta: f64) -> Result<f64> {
    let up = open_loop_phi(eps + delta, phi_bar, 1e-15)?;
    let down = open_loop_phi(eps - delta, phi_bar, 1e-15)?;
    Ok((up - down) / (2.0 * delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResponse {
    pub eps: f64,
    pub phi_bar: f64,
    pub df_deps: f64,
    pub r_of_one: f64,
    /// `(dF/deps) / (1 - R(1))`.
    pub dphibar_deps: f64,
}

/// Response of the fixed point to `eps` from the susceptibility.
pub fn fixed_point_response(eps: f64, tol: f64) -> Result<FixedPointResponse> {
    let fp = solve_fixed_point(eps, tol)?;
    let chi = susceptibility(eps, fp.phi_bar, STABILITY_HORIZON)?;
    let df = df_deps(eps, fp.phi_bar, 1e-4)?;
    Ok(FixedPointResponse {
        eps,
        phi_bar: fp.phi_bar,
        df_deps: df,
        r_of_one: chi.r_of_one,
        dphibar_deps: df / (1.0 - chi.r_of_one),
    })
}

/// Smallest `eps` in `[lo, hi]` (to `tol`) at which the primary fixed point
/// is unstable, by bisection on the stability certificate.
pub fn stability_threshold(lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let unstable = |e: f64| -> Result<bool> { Ok(!solve_fixed_point(e, 1e-12)?.stable) };
    if unstable(lo)? || !unstable(hi)? {
        return Err(Error::config(format!(
            "stability does not change across [{lo}, {hi}]"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if unstable(m)? {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Exact stationary autocovariance of `phi(q_n)` for a single unit of the
/// driven system at `K`: `C(m) = int phi L^m[(phi - Phi) rho]`.
pub fn phi_autocovariance(k: f64, max_lag: usize) -> Result<AutocovarianceEstimate> {
    let (rho, op) = frozen_operator(k)?;
    let mean = rho.phi();
    let col = collocation(op.order());
    let centered: Vec<f64> = col
        .nodes
        .iter()
        .map(|&x| (crate::maps::phi_expanding(x) - mean) * rho.eval(x))
        .collect();
    let mut f = col.dct.coefficients(&centered);
    remove_mass(&mut f, &rho.coeffs);
    let mut values = Vec::with_capacity(max_lag + 1);
    for _ in 0..=max_lag {
        values.push(phi_of(&f));
        f = op.apply(&f);
    }
    AutocovarianceEstimate::from_values(values, 0)
}

/// Relative step in `K` for the derivative of the transfer operator.
const TANGENT_DK: f64 = 1e-7;

/// Options for the tangent dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    /// Frozen truncation order; required.
    pub order: Option<usize>,
    /// Steps between QR re-orthonormalizations.
    pub qr_interval: usize,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            order: Some(DEFAULT_TANGENT_ORDER),
            qr_interval: 5,
        }
    }
}

/// Leading `n_exp` Lyapunov exponents of `rho -> L_{K(Phi(rho))} rho` at a
/// frozen order, from Jacobian-vector products on the zero-mass tangent
/// space.
pub fn lyapunov_spectrum(
    eps: f64,
    n_exp: usize,
    n: usize,
    burn_in: usize,
    cfg: LyapunovConfig,
) -> Result<Vec<f64>> {
    let order = cfg
        .order
        .ok_or_else(|| Error::config("tangent dynamics needs a frozen truncation order"))?;
    if n_exp == 0 || n_exp > 8 {
        return Err(Error::config(format!(
            "n_exp must be in 1..=8, got {n_exp}"
        )));
    }
    if n_exp >= order {
        return Err(Error::config("n_exp must be below the truncation order"));
    }
    if cfg.qr_interval == 0 || n == 0 {
        return Err(Error::config("qr_interval and N must be positive"));
    }
    let warm = run_macro(eps, burn_in, &DensityRep::uniform())?;
    let mut rho = warm.final_density.resized(order).renormalized()?.0.coeffs;
    let col = collocation(order);
    let project = |v: &mut Vec<f64>| {
        let m = chebyshev::integral(v);
        v[0] -= 0.5 * m;
    };
    // deterministic, well-spread initial tangent vectors
    let mut tangents: Vec<Vec<f64>> = (0..n_exp)
        .map(|i| {
            let mut v: Vec<f64> = (0..order)
                .map(|k| ((k + 1) as f64 * (i + 1) as f64 * 0.7).sin() / (1.0 + k as f64))
                .collect();
            project(&mut v);
            v
        })
        .collect();
    gram_schmidt(&mut tangents);
    let mut sums = vec![0.0; n_exp];
    for t in 0..n {
        // J v = L_K v + eps (1 - K^2) Phi(v) dL_K/dK rho; only the last
        // factor is differenced, so its error is one fixed rank-one term
        let k = k_of(eps, phi_of(&rho));
        let pre = preimages(&col.nodes, k)?;
        let dk = TANGENT_DK * (1.0 - k * k);
        let up = apply_with(&col, &preimages(&col.nodes, k + dk)?, &rho);
        let down = apply_with(&col, &preimages(&col.nodes, k - dk)?, &rho);
        let gain = eps * (1.0 - k * k) / (2.0 * dk);
        for v in tangents.iter_mut() {
            let p = gain * phi_of(v);
            let lv = apply_with(&col, &pre, v);
            *v = lv
                .iter()
                .zip(up.iter().zip(&down))
                .map(|(l, (u, d))| l + p * (u - d))
                .collect();
            project(v);
        }
        rho = DensityRep {
            coeffs: apply_with(&col, &pre, &rho),
        }
        .renormalized()?
        .0
        .coeffs;
        if (t + 1) % cfg.qr_interval == 0 || t + 1 == n {
            for (s, r) in sums.iter_mut().zip(gram_schmidt(&mut tangents)) {
                *s += r.ln();
            }
        }
    }
    Ok(sums.iter().map(|s| s / n as f64).collect())
}

/// Modified Gram-Schmidt in place; returns the diagonal of `R`.
fn gram_schmidt(vs: &mut [Vec<f64>]) -> Vec<f64> {
    let mut diag = Vec::with_capacity(vs.len());
    for i in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let d: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        diag.push(norm);
    }
    diag
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationRow {
    pub eps: f64,
    pub samples: Vec<f64>,
}

impl BifurcationRow {
    /// Number of attractor values distinct at resolution `tol`.
    pub fn distinct(&self, tol: f64) -> usize {
        let mut v = self.samples.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup_by(|a, b| (*a - *b).abs() <= tol);
        v.len()
    }
}

/// Attractor samples of `Phi` on an equispaced `eps` grid, continuing each
/// run from the final density of the previous one.
pub fn bifurcation_scan(
    eps_lo: f64,
    eps_hi: f64,
    n_eps: usize,
    n: usize,
    burn_in: usize,
) -> Result<Vec<BifurcationRow>> {
    if n_eps == 0 || !(eps_hi >= eps_lo) {
        return Err(Error::config("bad eps range for bifurcation scan"));
    }
    if n <= burn_in {
        return Err(Error::config("need N > burn_in"));
    }
    let mut rho = DensityRep::uniform();
    let mut rows = Vec::with_capacity(n_eps);
    for i in 0..n_eps {
        let eps = if n_eps == 1 {
            eps_lo
        } else {
            eps_lo + (eps_hi - eps_lo) * i as f64 / (n_eps - 1) as f64
        };
        let traj = run_macro(eps, n, &rho)?;
        rows.push(BifurcationRow {
            eps,
            samples: traj.phi[burn_in..].to_vec(),
        });
        rho = traj.final_density;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::step_expanding;

    #[test]
    fn phi_range() {
        assert!((PHI_MAX - 0.764_583_333_333_333_4).abs() < 1e-15);
        assert!((DensityRep::uniform().mass() - 1.0).abs() < 1e-15);
        assert!(DensityRep::uniform().phi().abs() < 1e-16);
    }

    #[test]
    fn branch_inverse_roundtrip() {
        for &k in &[-0.995, -0.5, 0.0, 0.3, 0.96] {
            let g = ExpandingBranch::new(k);
            for i in 0..=200 {
                let y = -1.0 + i as f64 / 100.0;
                let u = invert_branch(&g, y).unwrap();
                assert!((g.eval(u) - y).abs() <= 1e-14, "k={k} y={y}");
            }
        }
        assert!(invert_branch(&ExpandingBranch::new(0.2), 1.5).is_err());
    }

    #[test]
    fn doubling_preserves_lebesgue() {
        let s = transfer_step(&DensityRep::uniform(), 0.0).unwrap();
        assert!((s.rho.coeffs[0] - 0.5).abs() < 1e-12);
        assert!(s.rho.coeffs[1..].iter().all(|c| c.abs() < 1e-12));
        assert!((s.renorm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transfer_conserves_mass() {
        let rho = DensityRep::from_coeffs(vec![0.5, 0.1, -0.05, 0.02]).unwrap();
        for &k in &[-0.9, -0.3, 0.0, 0.5] {
            let c = transfer_fixed(&rho.coeffs, k, 128).unwrap();
            assert!((chebyshev::integral(&c) - rho.mass()).abs() < 1e-10);
        }
    }

    #[test]
    fn matrix_form_matches_collocation() {
        let rho = [0.5, 0.1, -0.05, 0.02, 0.01];
        for &k in &[-0.97, 0.0, 0.6] {
            let a = TransferMatrix::new(k, 64).unwrap().apply(&rho);
            let b = transfer_fixed(&rho, k, 64).unwrap();
            assert!(max_diff(&a, &b) < 1e-13);
        }
    }

    #[test]
    fn macro_step_uniform_and_decoupled() {
        let (_, _) = macro_step(&DensityRep::uniform(), 15.0, None).unwrap();
        let a = macro_step(&DensityRep::uniform(), 0.0, None).unwrap();
        let b = transfer_step(&DensityRep::uniform(), (-2.0f64).tanh()).unwrap();
        assert_eq!(a.0, b.rho);
        // eps = 0: the driver is irrelevant
        let rho = a.0;
        let x = macro_step(&rho, 0.0, Some(0.4)).unwrap();
        let y = macro_step(&rho, 0.0, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn invariant_density_is_stationary_and_positive() {
        let k = (-2.0f64).tanh();
        let rho = invariant_density(k, 1e-14).unwrap();
        let next = transfer_step(&rho, k).unwrap().rho;
        assert!(max_diff(&next.coeffs, &rho.coeffs) < 1e-12);
        for i in 0..1000 {
            let x = -1.0 + 2.0 * (i as f64 + 0.5) / 1000.0;
            assert!(rho.eval(x) >= -1e-8);
        }
        // self-consistency of the decoupled fixed point
        let (_, phi) = macro_step(&rho, 0.0, None).unwrap();
        assert!((phi - rho.phi()).abs() < 1e-12);
        // independent fine-grid collocation gives 0.37700653
        assert!((phi - 0.377_006_53).abs() < 5e-8, "{phi}");
    }

    #[test]
    fn monte_carlo_agrees_with_spectral_phi() {
        let k = (-2.0f64).tanh();
        let rho = invariant_density(k, 1e-14).unwrap();
        let mut q: Vec<f64> = (0..20_000)
            .map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 20_000.0)
            .collect();
        let mut acc = 0.0;
        let steps = 200;
        for t in 0..steps {
            for x in q.iter_mut() {
                *x = step_expanding(*x, k).unwrap();
            }
            if t >= 50 {
                acc += q
                    .iter()
                    .map(|&x| crate::maps::phi_expanding(x))
                    .sum::<f64>()
                    / q.len() as f64;
            }
        }
        let mc = acc / (steps - 50) as f64;
        assert!((mc - rho.phi()).abs() < 5e-3, "{mc} vs {}", rho.phi());
    }

    #[test]
    fn run_macro_converges_at_15_and_decouples_at_0() {
        let t = run_macro(15.0, 1000, &DensityRep::uniform()).unwrap();
        let n = t.phi.len();
        assert!((t.phi[n - 1] - t.phi[n - 2]).abs() < 1e-10);
        for (p, k) in t.phi.iter().zip(&t.k) {
            assert_eq!(*k, k_of(15.0, *p));
        }
        let z = run_macro(0.0, 20, &DensityRep::uniform()).unwrap();
        assert!(z.k.iter().all(|&k| k == (-2.0f64).tanh()));
    }

    #[test]
    fn noisy_macro_limits() {
        let acv = AutocovarianceEstimate::from_values(vec![0.1, 0.02], 0).unwrap();
        let a = run_macro_noisy(15.0, 50, None, &acv, 1, &DensityRep::uniform()).unwrap();
        let b = run_macro(15.0, 50, &DensityRep::uniform()).unwrap();
        assert_eq!(a, b);
        let c = run_macro_noisy(15.0, 50, Some(100.0), &acv, 1, &DensityRep::uniform()).unwrap();
        let d = run_macro_noisy(15.0, 50, Some(100.0), &acv, 1, &DensityRep::uniform()).unwrap();
        assert_eq!(c, d);
        assert_ne!(c, b);
        assert!(run_macro_noisy(15.0, 50, Some(0.0), &acv, 1, &DensityRep::uniform()).is_err());
    }

    #[test]
    fn fixed_point_at_zero_and_fifteen() {
        let fp0 = solve_fixed_point(0.0, 1e-12).unwrap();
        let direct = invariant_density((-2.0f64).tanh(), 1e-14).unwrap().phi();
        assert!((fp0.phi_bar - direct).abs() < 1e-10);
        assert!(fp0.stable);
        assert_eq!(fp0.all_roots.len(), 1);

        let fp = solve_fixed_point(15.0, 1e-12).unwrap();
        assert!(fp.stable);
        assert!(fp.residual <= 1e-12);
        let t = run_macro(15.0, 2000, &DensityRep::uniform()).unwrap();
        assert!((fp.phi_bar - t.phi.last().unwrap()).abs() < 1e-8);
        assert!((fp.phi_bar - 0.091_007_0).abs() < 5e-7, "{}", fp.phi_bar);
    }

    #[test]
    fn susceptibility_properties() {
        let zero = susceptibility(0.0, 0.3, 50).unwrap();
        assert!(zero.chi.iter().all(|c| c.abs() < 1e-10));
        assert!(zero.stable());

        let fp = solve_fixed_point(15.0, 1e-12).unwrap();
        let a = impulse_response(15.0, fp.phi_bar, 1e-6, 10).unwrap();
        let b = impulse_response(15.0, fp.phi_bar, 2e-6, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            // responses per unit kick agree, i.e. raw responses scale by 2
            assert!((2.0 * y / (2.0 * x) - 1.0).abs() < 1e-3 || x.abs() < 1e-9);
        }
        let chi = susceptibility(15.0, fp.phi_bar, STABILITY_HORIZON).unwrap();
        assert!(chi.decaying);
        assert!((chi.r_of_one - fp.r_at_1).abs() < 1e-9);
    }

    #[test]
    fn derivative_identity() {
        let fp = solve_fixed_point(10.0, 1e-12).unwrap();
        let chi = susceptibility(10.0, fp.phi_bar, 200).unwrap();
        let df = df_deps(10.0, fp.phi_bar, 1e-4).unwrap();
        let identity = fp.phi_bar / 10.0 * chi.r_of_one;
        assert!(
            (df - identity).abs() < 1e-6 * (1.0 + df.abs()),
            "{df} vs {identity}"
        );
    }

    #[test]
    fn exact_autocovariance_matches_simulation() {
        let k = (-2.0f64).tanh();
        let acv = phi_autocovariance(k, 3).unwrap();
        assert!(acv.values[0] > 0.0);
        let mut q: Vec<f64> = (0..50_000)
            .map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 50_000.0)
            .collect();
        for _ in 0..50 {
            for x in q.iter_mut() {
                *x = step_expanding(*x, k).unwrap();
            }
        }
        let a: Vec<f64> = q.iter().map(|&x| crate::maps::phi_expanding(x)).collect();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(
            (var - acv.values[0]).abs() < 0.02 * acv.values[0] + 2e-3,
            "{var} vs {}",
            acv.values[0]
        );
    }

    #[test]
    fn lyapunov_config_errors() {
        let cfg = LyapunovConfig {
            order: None,
            qr_interval: 5,
        };
        assert!(matches!(
            lyapunov_spectrum(15.0, 2, 10, 10, cfg),
            Err(Error::Config(_))
        ));
        assert!(lyapunov_spectrum(15.0, 9, 10, 10, LyapunovConfig::default()).is_err());
    }

    #[test]
    fn lyapunov_negative_at_stable_point() {
        let cfg = LyapunovConfig {
            order: Some(64),
            qr_interval: 5,
        };
        let l = lyapunov_spectrum(15.0, 2, 300, 200, cfg).unwrap();
        assert!(l[0] < 0.0, "{l:?}");
        assert!(l[0] >= l[1]);
    }

    #[test]
    fn bifurcation_rows() {
        let rows = bifurcation_scan(15.0, 15.0, 1, 600, 500).unwrap();
        assert_eq!(rows[0].distinct(1e-8), 1);
        assert!(bifurcation_scan(15.0, 16.0, 2, 10, 10).is_err());
    }
}
