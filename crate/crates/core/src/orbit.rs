//! Singular return map, its fixed point, and the spectral stability test.

use nalgebra::{Complex, DMatrix};

use crate::entry_exit::{
    entry_delay_slots, jump_jacobian, jump_map, leg_jacobian, transit_leg, EntryExitError,
    JumpJacobian, JumpResult, LegJacobian, LegTransit, SolverOptions,
};
use crate::ode::{field, integrate_until_with, Direction, EventSpec};
use crate::system::{AssumptionReport, ManifoldChain, SlowFastSystem};

#[derive(Debug, Clone, thiserror::Error)]
pub enum OrbitError {
    #[error(transparent)]
    Leg(#[from] EntryExitError),
    #[error("section point has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("Newton iteration stalled at residual {residual:.3e} after {iterations} iterations")]
    Stalled { residual: f64, iterations: usize },
    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("planar condition ({condition}) violated: {detail}")]
    PlanarCondition { condition: &'static str, detail: String },
}

/// Converged singular closed orbit.
#[derive(Debug, Clone)]
pub struct SingularOrbit {
    pub legs: Vec<LegTransit>,
    /// `jumps[i]` connects the exit of leg `i` to the entry of leg `i + 1`.
    pub jumps: Vec<JumpResult>,
    pub section: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Stable,
    Unstable,
    Inconclusive,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Stable => "stable",
            Classification::Unstable => "unstable",
            Classification::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub dp: DMatrix<f64>,
    /// Sorted by decreasing modulus.
    pub eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    pub det_dp_minus_i: f64,
    pub classification: Classification,
}

impl StabilityReport {
    pub fn from_matrix(dp: DMatrix<f64>, margin: f64) -> Self {
        let mut eigenvalues: Vec<Complex<f64>> = dp.clone().complex_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| {
            b.norm()
                .partial_cmp(&a.norm())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
        });
        let spectral_radius = eigenvalues.iter().map(|e| e.norm()).fold(0.0, f64::max);
        let k = dp.nrows();
        let det_dp_minus_i = (&dp - DMatrix::identity(k, k)).determinant();
        let classification = if det_dp_minus_i.abs() < margin || (spectral_radius - 1.0).abs() <= margin
        {
            Classification::Inconclusive
        } else if spectral_radius < 1.0 {
            Classification::Stable
        } else {
            Classification::Unstable
        };
        StabilityReport {
            dp,
            eigenvalues,
            spectral_radius,
            det_dp_minus_i,
            classification,
        }
    }
}

/// One trip around the chain.
#[derive(Debug, Clone)]
pub struct ReturnPass {
    pub image: Vec<f64>,
    pub legs: Vec<LegTransit>,
    pub jumps: Vec<JumpResult>,
}

pub fn section_dim(sys: &dyn SlowFastSystem) -> usize {
    sys.n() + sys.m() - 1
}

/// Split a section point at leg `leg`'s entry into `(p, d)`.
pub fn unpack_section(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = sys.n();
    let mut d = vec![0.0; sys.m()];
    for (k, &j) in entry_delay_slots(chain, sys.m(), leg).iter().enumerate() {
        d[j] = x[n + k];
    }
    (x[..n].to_vec(), d)
}

pub fn pack_section(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    p: &[f64],
    d: &[f64],
) -> Vec<f64> {
    let mut x = p.to_vec();
    x.extend(entry_delay_slots(chain, sys.m(), leg).iter().map(|&j| d[j]));
    x
}

pub fn return_pass(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    x: &[f64],
    opts: &SolverOptions,
) -> Result<ReturnPass, OrbitError> {
    if x.len() != section_dim(sys) {
        return Err(OrbitError::Dimension {
            expected: section_dim(sys),
            got: x.len(),
        });
    }
    let (mut p, mut d) = unpack_section(sys, chain, 0, x);
    let mut legs = Vec::with_capacity(chain.len());
    let mut jumps = Vec::with_capacity(chain.len());
    for i in 0..chain.len() {
        let t = transit_leg(sys, chain, i, &p, &d, opts)?;
        let next = (i + 1) % chain.len();
        let j = jump_map(sys, chain, next, &t.exit_p, opts)?;
        p = j.landing_p.clone();
        d = t.exit_d.clone();
        legs.push(t);
        jumps.push(j);
    }
    Ok(ReturnPass {
        image: pack_section(sys, chain, 0, &p, &d),
        legs,
        jumps,
    })
}

/// Section point after one trip around the chain.
pub fn return_map(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    x: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<f64>, OrbitError> {
    return_pass(sys, chain, x, opts).map(|r| r.image)
}

/// Composed Jacobian `(π_1 × id) ∘ Q̂_N ∘ … ∘ (π_2 × id) ∘ Q̂_1`.
pub fn compose_jacobian(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    pass: &ReturnPass,
    opts: &SolverOptions,
) -> Result<(DMatrix<f64>, Vec<LegJacobian>, Vec<JumpJacobian>), OrbitError> {
    let n = sys.n();
    let s = section_dim(sys);
    let mut dp = DMatrix::identity(s, s);
    let mut legs = Vec::new();
    let mut jumps = Vec::new();
    for (i, t) in pass.legs.iter().enumerate() {
        let lj = leg_jacobian(sys, chain, t, opts)?;
        let jj = jump_jacobian(sys, chain, (i + 1) % chain.len(), &t.exit_p, opts)?;
        let mut pi = DMatrix::identity(s, s);
        pi.view_mut((0, 0), (n, n)).copy_from(&jj.dpi);
        dp = pi * &lj.dqhat * dp;
        legs.push(lj);
        jumps.push(jj);
    }
    Ok((dp, legs, jumps))
}

#[derive(Debug, Clone, Copy)]
pub struct OrbitOptions {
    pub solver: SolverOptions,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub margin: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions {
            solver: SolverOptions::default(),
            newton_tol: 1e-9,
            max_iter: 50,
            max_halvings: 8,
            margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrbitSolution {
    pub orbit: SingularOrbit,
    pub report: StabilityReport,
    pub leg_jacobians: Vec<LegJacobian>,
    pub jump_jacobians: Vec<JumpJacobian>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Starting section point: the first leg's guess, with delays estimated by
/// following each guessed leg to its closest approach to the next guess.
pub fn initial_section(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    opts: &SolverOptions,
) -> Vec<f64> {
    let m = sys.m();
    let big_n = chain.len();
    let mut d = vec![0.0; m];
    if m > 1 {
        let integrals: Vec<Option<Vec<f64>>> =
            (0..big_n).map(|l| guessed_leg_integrals(sys, chain, l, opts)).collect();
        for j in entry_delay_slots(chain, m, 0) {
            if let Some(s) = (1..big_n).rev().find(|&l| chain.leg(l).j_in == j) {
                d[j] = (s..big_n)
                    .map(|l| integrals[l].as_ref().map_or(0.0, |v| v[j]))
                    .sum();
            }
        }
    }
    pack_section(sys, chain, 0, &chain.leg(0).a_guess, &d)
}

fn guessed_leg_integrals(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    opts: &SolverOptions,
) -> Option<Vec<f64>> {
    let n = sys.n();
    let m = sys.m();
    let spec = chain.leg(leg);
    let target = chain.leg(leg + 1).a_guess.clone();
    let z = spec.z.clone();
    let start = spec.a_guess.clone();
    let radius = 0.5
        * start
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            .max(1e-3);
    let f = field(n + m, |_, y: &[f64], dy: &mut [f64]| {
        sys.f(&y[..n], &z, 0.0, &mut dy[..n]);
        for j in 0..m {
            dy[n + j] = sys.gz(j, &y[..n], &z, 0.0);
        }
    });
    let mut fp = vec![0.0; n];
    let ev = EventSpec::new(
        |_, y: &[f64]| {
            let dist2: f64 = (0..n).map(|k| (y[k] - target[k]).powi(2)).sum();
            if dist2.sqrt() > radius {
                return -1.0;
            }
            let mut fp = vec![0.0; n];
            sys.f(&y[..n], &z, 0.0, &mut fp);
            (0..n).map(|k| (y[k] - target[k]) * fp[k]).sum()
        },
        Direction::Rising,
    );
    fp.clear();
    let mut y0 = start;
    y0.extend(std::iter::repeat(0.0).take(m));
    let ode = crate::ode::Options {
        tol: crate::ode::Tolerances::new(1e-8, 1e-10),
        ..Default::default()
    };
    integrate_until_with(&f, &y0, 0.0, &ev, opts.t_max.min(1e3), &ode)
        .ok()
        .map(|hit| hit.y[n..].to_vec())
}

pub fn find_singular_orbit(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    opts: &OrbitOptions,
) -> Result<OrbitSolution, OrbitError> {
    let x0 = initial_section(sys, chain, &opts.solver);
    find_singular_orbit_from(sys, chain, &x0, opts)
}

/// Newton iteration on `P(x) - x` started at section point `x0`.
pub fn find_singular_orbit_from(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    x0: &[f64],
    opts: &OrbitOptions,
) -> Result<OrbitSolution, OrbitError> {
    let s = section_dim(sys);
    let so = &opts.solver;
    let mut x = x0.to_vec();
    let mut pass = return_pass(sys, chain, &x, so)?;
    let mut g: Vec<f64> = pass.image.iter().zip(&x).map(|(a, b)| a - b).collect();
    let mut res = inf_norm(&g);
    let mut iterations = 0;
    let mut jac = compose_jacobian(sys, chain, &pass, so)?;
    while res >= opts.newton_tol {
        if iterations >= opts.max_iter {
            return Err(OrbitError::NoConvergence {
                residual: res,
                iterations,
            });
        }
        iterations += 1;
        let a = &jac.0 - DMatrix::identity(s, s);
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let rhs = -nalgebra::DVector::from_column_slice(&g);
        let step = svd
            .solve(&rhs, 1e-8 * smax)
            .map_err(|_| OrbitError::Stalled {
                residual: res,
                iterations,
            })?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + lambda * b).collect();
            if let Ok(p) = return_pass(sys, chain, &trial, so) {
                let gt: Vec<f64> = p.image.iter().zip(&trial).map(|(a, b)| a - b).collect();
                let rt = inf_norm(&gt);
                if rt < res {
                    if let Ok(j) = compose_jacobian(sys, chain, &p, so) {
                        accepted = Some((trial, p, gt, rt, j));
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xt, p, gt, rt, j)) => {
                x = xt;
                pass = p;
                g = gt;
                res = rt;
                jac = j;
            }
            None => {
                return Err(OrbitError::Stalled {
                    residual: res,
                    iterations,
                })
            }
        }
    }
    let (dp, leg_jacobians, jump_jacobians) = jac;
    let report = StabilityReport::from_matrix(dp, opts.margin);
    Ok(OrbitSolution {
        orbit: SingularOrbit {
            legs: pass.legs,
            jumps: pass.jumps,
            section: x,
            residual: res,
            iterations,
        },
        report,
        leg_jacobians,
        jump_jacobians,
    })
}

/// Run one trip around the chain from the guesses and record whether every
/// leg exits; used when Newton cannot start or stalls.
pub fn probe_chain(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    opts: &SolverOptions,
) -> AssumptionReport {
    let mut report = AssumptionReport::default();
    let x0 = initial_section(sys, chain, opts);
    let (mut p, mut d) = unpack_section(sys, chain, 0, &x0);
    for i in 0..chain.len() {
        match transit_leg(sys, chain, i, &p, &d, opts) {
            Ok(t) => {
                report.push(3, true, format!("leg {}: exits after tau = {:.6}", i + 1, t.tau));
                let viol = t.a5_violation;
                report.push(
                    5,
                    viol.is_none(),
                    match viol {
                        None => format!("leg {}: delays nonzero in the interior", i + 1),
                        Some((j, tau)) => format!(
                            "leg {}: delay of component {} reaches zero at tau = {tau:.6}",
                            i + 1,
                            j + 1
                        ),
                    },
                );
                match jump_map(sys, chain, (i + 1) % chain.len(), &t.exit_p, opts) {
                    Ok(jr) => {
                        p = jr.landing_p;
                        d = t.exit_d;
                    }
                    Err(e) => {
                        report.push(2, false, e.to_string());
                        return report;
                    }
                }
            }
            Err(e @ EntryExitError::NoExit { .. }) => {
                report.push(3, false, e.to_string());
                report.push(5, false, e.to_string());
                return report;
            }
            Err(e) => {
                report.push(4, false, e.to_string());
                return report;
            }
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct PlanarLambda {
    pub lambda: f64,
    /// `ln|F(a1)/F(a0)|`.
    pub log_f_ratio: f64,
    /// `∫(∂_a H + ∂_b G) dt` along the regularised heteroclinic.
    pub trace_integral: f64,
    /// `d(π∘Q)/da` from the leg and jump Jacobians.
    pub composite: f64,
}

/// Stability exponent of a planar relaxation oscillation on the face `b = 0`
/// with landing `a0` and exit `a1`.
pub fn planar_lambda(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    a0: f64,
    a1: f64,
    opts: &SolverOptions,
) -> Result<PlanarLambda, OrbitError> {
    let cond = |condition: &'static str, detail: String| OrbitError::PlanarCondition { condition, detail };
    if sys.n() != 1 || sys.m() != 1 || chain.len() != 1 {
        return Err(cond("form", "expected n = m = 1 and a single leg".into()));
    }
    let z = chain.leg(0).z.clone();
    let big_f = |a: f64| {
        let mut out = [0.0];
        sys.f(&[a], &z, 0.0, &mut out);
        out[0]
    };
    let big_g = |a: f64| sys.gz(0, &[a], &z, 0.0);
    const SAMPLES: usize = 2000;
    let (lo, hi) = (a0.min(a1), a0.max(a1));
    let f0 = big_f(a0);
    for k in 0..=SAMPLES {
        let a = lo + (hi - lo) * k as f64 / SAMPLES as f64;
        let fa = big_f(a);
        if !(fa * f0 > 0.0) {
            return Err(cond("ii", format!("F changes sign or vanishes at a = {a}")));
        }
    }
    if !(big_g(a0) < 0.0 && big_g(a1) > 0.0) {
        return Err(cond(
            "iii",
            format!("G(a0) = {:.3e}, G(a1) = {:.3e}", big_g(a0), big_g(a1)),
        ));
    }
    // composite Simpson for ∫ G/F da, watching partial sums
    let w = (a1 - a0) / SAMPLES as f64;
    let phi = |a: f64| big_g(a) / big_f(a);
    let mut total = 0.0;
    let mut scale = 0.0;
    for k in 0..SAMPLES / 2 {
        let x = a0 + 2.0 * k as f64 * w;
        let piece = w / 3.0 * (phi(x) + 4.0 * phi(x + w) + phi(x + 2.0 * w));
        total += piece;
        scale += piece.abs();
        if k + 1 < SAMPLES / 2 && total >= 0.0 {
            return Err(cond("iv", format!("partial integral nonnegative at a = {}", x + 2.0 * w)));
        }
    }
    if total.abs() > 1e-6 * scale.max(1e-300) {
        return Err(cond("iv", format!("∫G/F da = {total:.3e}")));
    }
    let jr = jump_map(sys, chain, 0, &[a1], opts)?;
    if (jr.landing_p[0] - a0).abs() > 1e-6 * a0.abs().max(1.0) {
        return Err(cond(
            "i",
            format!("heteroclinic from a1 lands at {} instead of a0", jr.landing_p[0]),
        ));
    }
    let jj = jump_jacobian(sys, chain, 0, &[a1], opts)?;
    let t = transit_leg(sys, chain, 0, &[a0], &[0.0], opts)?;
    let lj = leg_jacobian(sys, chain, &t, opts)?;
    let composite = jj.dpi[(0, 0)] * lj.dq[(0, 0)];
    let log_f_ratio = (big_f(a1) / big_f(a0)).abs().ln();
    Ok(PlanarLambda {
        lambda: log_f_ratio + jj.trace_integral,
        log_f_ratio,
        trace_integral: jj.trace_integral,
        composite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_bands() {
        let r = StabilityReport::from_matrix(DMatrix::from_diagonal_element(2, 2, 0.5), 1e-3);
        assert_eq!(r.classification, Classification::Stable);
        let r = StabilityReport::from_matrix(DMatrix::from_diagonal_element(2, 2, 1.5), 1e-3);
        assert_eq!(r.classification, Classification::Unstable);
        let r = StabilityReport::from_matrix(
            DMatrix::from_row_slice(2, 2, &[1.0005, 0.0, 0.0, 0.2]),
            1e-3,
        );
        assert_eq!(r.classification, Classification::Inconclusive);
    }

    #[test]
    fn rotation_eigenvalues_come_in_conjugate_pairs() {
        let (c, s) = (0.9 * 0.3f64.cos(), 0.9 * 0.3f64.sin());
        let dp = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.1]);
        let r = StabilityReport::from_matrix(dp, 1e-3);
        assert!((r.eigenvalues[0].norm() - 0.9).abs() < 1e-12);
        assert!((r.eigenvalues[0].im + r.eigenvalues[1].im).abs() < 1e-12);
        assert!((r.eigenvalues[2].re - 0.1).abs() < 1e-12);
        assert_eq!(r.classification, Classification::Stable);
    }
}
