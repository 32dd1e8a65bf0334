//! One-step kernels of the three microscopic map families, together with the
//! coupling, perturbation and observable functions and the parameter
//! distributions the heterogeneous ensembles are drawn from.
//!
//! Everything here is a pure function and safe to call from any thread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};

/// Excursions beyond the expanding-map domain up to this size are rounding
/// and get clamped; anything larger is a step fault.
pub const EXPANDING_DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticUnitState {
    pub q: f64,
    /// Doubling-cocycle coordinate in `[0, 1)`.
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpandingUnitState {
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusUnitState {
    pub x: f64,
    pub y: f64,
}

/// `4 (q (1 - q))^2`, the additive perturbation of the logistic branch.
#[inline]
pub fn perturbation_g(q: f64) -> f64 {
    let p = q * (1.0 - q);
    4.0 * p * p
}

/// Mean-field coupling `(1 - 2q) q (1 - q) tanh(phi)`.
#[inline]
pub fn coupling_h(q: f64, phi_mean: f64) -> f64 {
    coupling_h_tanh(q, phi_mean.tanh())
}

#[inline]
pub(crate) fn coupling_h_tanh(q: f64, tanh_phi: f64) -> f64 {
    (1.0 - 2.0 * q) * q * (1.0 - q) * tanh_phi
}

/// Active branch of the modified logistic map with `tanh(phi)` precomputed.
/// Shared by the scalar kernel and the ensemble loops so that both produce
/// identical bits.
#[inline(always)]
pub(crate) fn logistic_branch(q: f64, a: f64, tanh_phi: f64, eps: f64) -> f64 {
    a * q * (1.0 - q) + coupling_h_tanh(q, tanh_phi) + eps * perturbation_g(q)
}

/// `4 T5(2q - 1) + 1` with `T5(x) = 16x^5 - 20x^3 + 5x`.
#[inline]
pub fn phi_logistic(q: f64) -> f64 {
    let x = 2.0 * q - 1.0;
    let x2 = x * x;
    4.0 * x * (5.0 + x2 * (-20.0 + 16.0 * x2)) + 1.0
}

/// One step of the modified logistic map. With `coupled == false` the mean
/// field is ignored (`h = 0`).
pub fn step_logistic(
    state: LogisticUnitState,
    a: f64,
    phi_mean: f64,
    eps: f64,
    coupled: bool,
) -> Result<LogisticUnitState> {
    if state.r < 0.5 {
        return Ok(LogisticUnitState {
            q: state.q,
            r: 2.0 * state.r,
        });
    }
    let tanh_phi = if coupled { phi_mean.tanh() } else { 0.0 };
    let q = logistic_branch(state.q, a, tanh_phi, eps);
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::StepFault {
            family: "logistic",
            value: q,
            unit: None,
            step: None,
        });
    }
    Ok(LogisticUnitState {
        q,
        r: 2.0 * state.r - 1.0,
    })
}

/// Doubling map `T(q) = 2q - sign(q)` on `[-1, 1]`, with `T(0) = 0`.
#[inline(always)]
pub fn doubling(q: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else {
        2.0 * q - 1.0f64.copysign(q)
    }
}

/// Precomputed constants of the smooth diffeomorphism `g_K` of `[-1, 1]`
/// that follows the doubling map.
#[derive(Debug, Clone, Copy)]
pub struct ExpandingBranch {
    pub k: f64,
    c: f64,
    inv_den: f64,
}

impl ExpandingBranch {
    pub fn new(k: f64) -> Self {
        let den = 1.0 - 0.97 * k * k;
        Self {
            k,
            c: 0.03 * den,
            inv_den: 1.0 / den,
        }
    }

    /// `g_K(u)`; maps `[-1, 1]` onto itself with `g(-1) = -1`, `g(1) = 1`.
    #[inline(always)]
    pub fn eval(&self, u: f64) -> f64 {
        let s = u + self.k;
        (u + self.k * (1.0 - (self.c + 0.97 * s * s).sqrt())) * self.inv_den
    }

    /// `g_K'(u)`, strictly positive for `|K| < 1`.
    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        let s = u + self.k;
        (1.0 - self.k * 0.97 * s / (self.c + 0.97 * s * s).sqrt()) * self.inv_den
    }

    /// `g_K''(u)`.
    #[inline]
    pub fn second_derivative(&self, u: f64) -> f64 {
        let s = u + self.k;
        let w = self.c + 0.97 * s * s;
        -self.k * 0.97 * self.c / (w * w.sqrt()) * self.inv_den
    }
}

/// Uniformly expanding map `q -> g_K(T(q))`.
pub fn step_expanding(q: f64, k: f64) -> Result<f64> {
    if !(k.abs() < 1.0) {
        return Err(Error::invalid(format!("|K| must be < 1, got {k}")));
    }
    let next = ExpandingBranch::new(k).eval(doubling(q));
    clamp_expanding(next)
}

#[inline]
pub(crate) fn clamp_expanding(q: f64) -> Result<f64> {
    if q.abs() <= 1.0 {
        Ok(q)
    } else if q.abs() <= 1.0 + EXPANDING_DOMAIN_TOL {
        Ok(q.clamp(-1.0, 1.0))
    } else {
        Err(Error::StepFault {
            family: "expanding",
            value: q,
            unit: None,
            step: None,
        })
    }
}

/// Even coupling function `-23/30 + 7/2 q^2 - 2 q^4`; integrates to zero
/// against Lebesgue measure on `[-1, 1]`.
#[inline(always)]
pub fn phi_expanding(q: f64) -> f64 {
    let q2 = q * q;
    -23.0 / 30.0 + q2 * (3.5 - 2.0 * q2)
}

/// Chebyshev coefficients of [`phi_expanding`]: `7/30 T0 + 3/4 T2 - 1/4 T4`.
pub const PHI_EXPANDING_CHEB: [f64; 5] = [7.0 / 30.0, 0.0, 0.75, 0.0, -0.25];

#[inline(always)]
pub(crate) fn wrap_unit(v: f64) -> f64 {
    let w = v.rem_euclid(1.0);
    // rem_euclid of a tiny negative number rounds up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Unimodal map of the torus `(R/Z)^2`.
pub fn step_torus(state: TorusUnitState, a: f64, eps: f64) -> TorusUnitState {
    use std::f64::consts::PI;
    let TorusUnitState { x, y } = state;
    TorusUnitState {
        x: wrap_unit(x + a * y * (PI * x).sin()),
        y: wrap_unit(y + a * (PI * (x + y)).sin() + eps),
    }
}

/// Law of the heterogeneous map parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParameterDistribution {
    /// Density `(1 / 2s) (1 + cos(pi (a - c) / s))` on `[c - s, c + s]`.
    RaisedCosine { center: f64, halfwidth: f64 },
    /// Finite mixture of point masses `(location, weight)`.
    DiscreteAtoms { atoms: Vec<(f64, f64)> },
}

impl ParameterDistribution {
    /// Smooth distribution used for the logistic ensembles, supported on
    /// `[3.7, 3.8]`.
    pub fn logistic_raised_cosine() -> Self {
        ParameterDistribution::RaisedCosine {
            center: 3.75,
            halfwidth: 0.05,
        }
    }

    /// `(delta_3.72 + delta_3.75 + delta_3.78) / 3`.
    pub fn logistic_three_atoms() -> Self {
        let w = 1.0 / 3.0;
        ParameterDistribution::DiscreteAtoms {
            atoms: vec![(3.72, w), (3.75, w), (3.78, w)],
        }
    }

    /// Raised cosine on `[3.7, 4.3]` for the torus ensembles.
    pub fn torus_raised_cosine() -> Self {
        ParameterDistribution::RaisedCosine {
            center: 4.0,
            halfwidth: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ParameterDistribution::RaisedCosine { center, halfwidth } => {
                if !center.is_finite() || !halfwidth.is_finite() || *halfwidth <= 0.0 {
                    return Err(Error::config(format!(
                        "raised cosine needs finite center and halfwidth > 0 (got {center}, {halfwidth})"
                    )));
                }
            }
            ParameterDistribution::DiscreteAtoms { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::config("discrete distribution has no atoms"));
                }
                if atoms
                    .iter()
                    .any(|&(loc, w)| !loc.is_finite() || !w.is_finite() || w <= 0.0)
                {
                    return Err(Error::config("atom weights must be positive and finite"));
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("atom weights sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    /// Support `[lo, hi]`.
    pub fn support(&self) -> (f64, f64) {
        match self {
            ParameterDistribution::RaisedCosine { center, halfwidth } => {
                (center - halfwidth, center + halfwidth)
            }
            ParameterDistribution::DiscreteAtoms { atoms } => atoms
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
                    (lo.min(x), hi.max(x))
                }),
        }
    }

    /// Density of the raised cosine; `None` for atomic laws.
    pub fn pdf(&self, a: f64) -> Option<f64> {
        match self {
            ParameterDistribution::RaisedCosine { center, halfwidth } => {
                let z = (a - center) / halfwidth;
                Some(if z.abs() > 1.0 {
                    0.0
                } else {
                    (1.0 + (std::f64::consts::PI * z).cos()) / (2.0 * halfwidth)
                })
            }
            ParameterDistribution::DiscreteAtoms { .. } => None,
        }
    }

    pub fn cdf(&self, a: f64) -> f64 {
        match self {
            ParameterDistribution::RaisedCosine { center, halfwidth } => {
                raised_cosine_cdf(a, *center, *halfwidth)
            }
            ParameterDistribution::DiscreteAtoms { atoms } => atoms
                .iter()
                .filter(|&&(x, _)| x <= a)
                .map(|&(_, w)| w)
                .sum(),
        }
    }

    /// Maps a uniform variate to a draw of the law.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            ParameterDistribution::RaisedCosine { center, halfwidth } => {
                raised_cosine_quantile(u, *center, *halfwidth)
            }
            ParameterDistribution::DiscreteAtoms { atoms } => {
                let mut acc = 0.0;
                for &(x, w) in atoms {
                    acc += w;
                    if u < acc {
                        return x;
                    }
                }
                atoms[atoms.len() - 1].0
            }
        }
    }
}

fn raised_cosine_cdf(a: f64, c: f64, s: f64) -> f64 {
    use std::f64::consts::PI;
    let z = (a - c) / s;
    if z <= -1.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        z / 2.0 + (PI * z).sin() / (2.0 * PI) + 0.5
    }
}

/// Inverse CDF by bisection to 1e-12 in the standardized coordinate.
fn raised_cosine_quantile(u: f64, c: f64, s: f64) -> f64 {
    use std::f64::consts::PI;
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid / 2.0 + (PI * mid).sin() / (2.0 * PI) + 0.5 < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    c + s * 0.5 * (lo + hi)
}

/// Draws `m` independent parameters. Draw `j` depends only on `(seed, j)`.
pub fn sample_parameters(dist: &ParameterDistribution, m: usize, seed: u64) -> Result<Vec<f64>> {
    dist.validate()?;
    if m == 0 {
        return Err(Error::config("need at least one parameter draw"));
    }
    Ok((0..m)
        .map(|j| {
            let mut rng = CounterRng::new(seed, j as u64, Purpose::Parameters);
            dist.quantile(rng.uniform())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logistic_step_examples() {
        let s = step_logistic(LogisticUnitState { q: 0.3, r: 0.25 }, 3.9, 0.7, 0.1, true).unwrap();
        assert_eq!(s, LogisticUnitState { q: 0.3, r: 0.5 });

        let s = step_logistic(LogisticUnitState { q: 0.5, r: 0.75 }, 3.75, 0.0, 0.0, true).unwrap();
        assert!(close(s.q, 0.9375, 1e-15));
        assert_eq!(s.r, 0.5);

        let s =
            step_logistic(LogisticUnitState { q: 0.5, r: 0.75 }, 3.75, 0.0, 0.1, false).unwrap();
        assert!(close(s.q, 0.9625, 1e-15));
        assert_eq!(s.r, 0.5);
    }

    #[test]
    fn logistic_escape_is_a_fault() {
        let err =
            step_logistic(LogisticUnitState { q: 0.45, r: 0.9 }, 4.0, 0.0, 0.3, false).unwrap_err();
        match err {
            Error::StepFault { value, .. } => assert!(value > 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn g_h_and_phi_values() {
        assert_eq!(perturbation_g(0.0), 0.0);
        assert_eq!(perturbation_g(0.5), 0.25);
        assert_eq!(perturbation_g(1.0), 0.0);

        assert_eq!(coupling_h(0.7, 0.0), 0.0);
        assert_eq!(coupling_h(0.5, 3.0), 0.0);
        assert!(close(coupling_h(0.25, 1.0), 0.07139945212085295, 1e-15));

        assert!(close(phi_logistic(0.5), 1.0, 1e-15));
        assert!(close(phi_logistic(1.0), 5.0, 1e-14));
        assert!(close(phi_logistic(0.0), -3.0, 1e-14));
    }

    #[test]
    fn expanding_step_examples() {
        assert!(close(step_expanding(0.25, 0.0).unwrap(), -0.5, 1e-15));
        assert!(close(step_expanding(-0.25, 0.0).unwrap(), 0.5, 1e-15));
        // direct evaluation of the closed form in double precision
        let v = step_expanding(0.25, (-2.0f64).tanh()).unwrap();
        assert!(close(v, -0.740967315684401, 1e-14), "{v}");
        assert!(step_expanding(0.1, 1.0).is_err());
    }

    #[test]
    fn expanding_branch_endpoints_and_monotone() {
        for &k in &[-0.99, -0.964, -0.5, 0.0, 0.3, 0.9, 0.999] {
            let g = ExpandingBranch::new(k);
            assert!(close(g.eval(-1.0), -1.0, 1e-12), "k={k}");
            assert!(close(g.eval(1.0), 1.0, 1e-12), "k={k}");
            for i in 0..=200 {
                let u = -1.0 + 2.0 * i as f64 / 200.0;
                assert!(g.derivative(u) > 0.0);
                let h = 1e-6;
                let fd = (g.eval(u + h) - g.eval(u - h)) / (2.0 * h);
                assert!((fd - g.derivative(u)).abs() < 1e-6 * (1.0 + fd.abs()));
                let fd2 = (g.derivative(u + h) - g.derivative(u - h)) / (2.0 * h);
                assert!((fd2 - g.second_derivative(u)).abs() < 1e-4 * (1.0 + fd2.abs()));
            }
        }
    }

    #[test]
    fn k_zero_reduces_to_doubling() {
        for i in 0..10_000 {
            let q = -1.0 + 2.0 * i as f64 / 9_999.0;
            let expect = if q == 0.0 { 0.0 } else { 2.0 * q - q.signum() };
            assert!((step_expanding(q, 0.0).unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn phi_expanding_values() {
        assert!(close(phi_expanding(0.0), -23.0 / 30.0, 1e-15));
        assert!(close(phi_expanding(1.0), 11.0 / 15.0, 1e-15));
        // Gauss-Legendre with 5 nodes is exact for degree <= 9
        let nodes = [
            (0.0, 128.0 / 225.0),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let integral: f64 = nodes.iter().map(|&(x, w)| w * phi_expanding(x)).sum();
        assert!(integral.abs() < 1e-12);
        for i in 0..50 {
            let q = -1.0 + 2.0 * i as f64 / 49.0;
            let cheb = PHI_EXPANDING_CHEB[0]
                + PHI_EXPANDING_CHEB[2] * (2.0 * q * q - 1.0)
                + PHI_EXPANDING_CHEB[4] * (8.0 * q.powi(4) - 8.0 * q * q + 1.0);
            assert!(close(cheb, phi_expanding(q), 1e-14));
        }
    }

    #[test]
    fn torus_examples() {
        let s = step_torus(TorusUnitState { x: 0.0, y: 0.0 }, 3.9, 0.0);
        assert_eq!(s, TorusUnitState { x: 0.0, y: 0.0 });
        let s = step_torus(TorusUnitState { x: 0.0, y: 0.5 }, 4.0, 0.0);
        assert!(close(s.x, 0.0, 1e-15) && close(s.y, 0.5, 1e-12));
        let s = step_torus(TorusUnitState { x: 0.5, y: 0.25 }, 3.7, 0.05);
        assert!(close(s.x, 0.42500000000000004, 1e-14));
        assert!(close(s.y, 0.9162950903902258, 1e-14));
        assert!(wrap_unit(-1e-18) < 1.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(ParameterDistribution::RaisedCosine {
            center: 3.75,
            halfwidth: 0.0
        }
        .validate()
        .is_err());
        assert!(ParameterDistribution::DiscreteAtoms {
            atoms: vec![(3.7, 0.5), (3.8, 0.4)]
        }
        .validate()
        .is_err());
        assert!(ParameterDistribution::DiscreteAtoms {
            atoms: vec![(3.7, -0.5), (3.8, 1.5)]
        }
        .validate()
        .is_err());
        assert!(sample_parameters(&ParameterDistribution::logistic_raised_cosine(), 0, 1).is_err());
    }

    #[test]
    fn raised_cosine_density_normalized() {
        let d = ParameterDistribution::RaisedCosine {
            center: 4.0,
            halfwidth: 0.3,
        };
        let n = 20_000;
        let h = 0.6 / n as f64;
        // composite midpoint rule
        let total: f64 = (0..n)
            .map(|i| d.pdf(3.7 + (i as f64 + 0.5) * h).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
        assert_eq!(d.support(), (3.7, 4.3));
    }

    #[test]
    fn raised_cosine_sampler_statistics() {
        let dist = ParameterDistribution::logistic_raised_cosine();
        let m = 1_000_000;
        let draws = sample_parameters(&dist, m, 2024).unwrap();
        assert!(draws.iter().all(|&a| (3.7..=3.8).contains(&a)));
        let mean = draws.iter().sum::<f64>() / m as f64;
        let sd = (draws.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        assert!((mean - 3.75).abs() <= 4.0 * sd / (m as f64).sqrt());

        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sup = sorted
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let f = dist.cdf(a);
                (f - i as f64 / m as f64)
                    .abs()
                    .max((f - (i + 1) as f64 / m as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(sup < 2e-3, "sup-norm {sup}");
    }

    #[test]
    fn atom_sampler_frequencies() {
        let dist = ParameterDistribution::logistic_three_atoms();
        let m = 300_000;
        let draws = sample_parameters(&dist, m, 9).unwrap();
        for loc in [3.72, 3.75, 3.78] {
            let freq = draws.iter().filter(|&&a| a == loc).count() as f64 / m as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.005);
        }
        assert_eq!(
            sample_parameters(&dist, 100, 3).unwrap(),
            sample_parameters(&dist, 100, 3).unwrap()
        );
    }
}
