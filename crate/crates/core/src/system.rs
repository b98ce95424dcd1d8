//! Slow-fast systems `p' = εf + h, z' = g`, their manifold chains and
//! sampled checks of the structural hypotheses.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::ode::VectorField;
use crate::orbit::SingularOrbit;

/// A slow-fast system with invariant faces `z^(j) ∈ {lo_j, hi_j}`.
///
/// Derivative methods default to central differences; implementations with
/// exact derivatives should override them.
pub trait SlowFastSystem: Send + Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    /// Per fast component `(lo, hi)`; infinite values allowed.
    fn z_bounds(&self) -> &[(f64, f64)];
    fn f(&self, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]);
    fn g(&self, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]);
    fn h(&self, _p: &[f64], _z: &[f64], _eps: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    /// `∂g^(j)/∂z^(j)`.
    fn gz(&self, j: usize, p: &[f64], z: &[f64], eps: f64) -> f64 {
        let mut zz = z.to_vec();
        let step = fd_step(z[j]);
        let mut out = vec![0.0; self.m()];
        zz[j] = z[j] + step;
        self.g(p, &zz, eps, &mut out);
        let up = out[j];
        zz[j] = z[j] - step;
        self.g(p, &zz, eps, &mut out);
        (up - out[j]) / (2.0 * step)
    }

    /// `∂f/∂p`, n×n.
    fn df_dp(&self, p: &[f64], z: &[f64], eps: f64) -> DMatrix<f64> {
        let n = self.n();
        let mut jac = DMatrix::zeros(n, n);
        let mut pp = p.to_vec();
        let (mut up, mut dn) = (vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            let step = fd_step(p[k]);
            pp[k] = p[k] + step;
            self.f(&pp, z, eps, &mut up);
            pp[k] = p[k] - step;
            self.f(&pp, z, eps, &mut dn);
            pp[k] = p[k];
            for i in 0..n {
                jac[(i, k)] = (up[i] - dn[i]) / (2.0 * step);
            }
        }
        jac
    }

    /// Gradient of `gz(j, ·)` in `p`.
    fn dgz_dp(&self, j: usize, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        let mut pp = p.to_vec();
        for k in 0..self.n() {
            let step = 1e-5 * p[k].abs().max(1.0);
            pp[k] = p[k] + step;
            let up = self.gz(j, &pp, z, eps);
            pp[k] = p[k] - step;
            let dn = self.gz(j, &pp, z, eps);
            pp[k] = p[k];
            out[k] = (up - dn) / (2.0 * step);
        }
    }

    /// `∂h/∂z^(j)`, length n.
    fn dh_dz(&self, j: usize, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        let n = self.n();
        let mut zz = z.to_vec();
        let step = fd_step(z[j]);
        let (mut up, mut dn) = (vec![0.0; n], vec![0.0; n]);
        zz[j] = z[j] + step;
        self.h(p, &zz, eps, &mut up);
        zz[j] = z[j] - step;
        self.h(p, &zz, eps, &mut dn);
        for i in 0..n {
            out[i] = (up[i] - dn[i]) / (2.0 * step);
        }
    }

    /// Named parameters, for reporting.
    fn params(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// One slow leg: the manifold `z = z`, the fast component changed by the
/// incoming jump, and a Newton guess for the landing point.
#[derive(Debug, Clone, PartialEq)]
pub struct LegSpec {
    pub z: Vec<f64>,
    /// Zero-based fast component index.
    pub j_in: usize,
    pub a_guess: Vec<f64>,
}

/// Cyclic sequence of legs; leg `i` is followed by leg `i + 1 mod N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldChain {
    pub legs: Vec<LegSpec>,
}

impl ManifoldChain {
    pub fn new(legs: Vec<LegSpec>) -> Self {
        ManifoldChain { legs }
    }

    pub fn len(&self) -> usize {
        self.legs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.legs.is_empty()
    }

    pub fn leg(&self, i: usize) -> &LegSpec {
        &self.legs[i % self.len()]
    }

    pub fn prev(&self, i: usize) -> &LegSpec {
        &self.legs[(i + self.len() - 1) % self.len()]
    }

    /// Component that jumps when leg `i` is left.
    pub fn j_out(&self, i: usize) -> usize {
        self.leg(i + 1).j_in
    }

    /// The same cycle started at leg `k`.
    pub fn rotated(&self, k: usize) -> ManifoldChain {
        let n = self.len();
        ManifoldChain {
            legs: (0..n).map(|i| self.legs[(i + k) % n].clone()).collect(),
        }
    }

    /// Structural problems of the chain against `sys`; empty when sound.
    pub fn structure_issues(&self, sys: &dyn SlowFastSystem) -> Vec<String> {
        let mut issues = Vec::new();
        let m = sys.m();
        if self.legs.is_empty() {
            issues.push("chain has no legs".into());
            return issues;
        }
        for (i, leg) in self.legs.iter().enumerate() {
            if leg.z.len() != m {
                issues.push(format!("leg {}: z has length {}, expected {m}", i + 1, leg.z.len()));
                continue;
            }
            if leg.a_guess.len() != sys.n() {
                issues.push(format!(
                    "leg {}: a_guess has length {}, expected {}",
                    i + 1,
                    leg.a_guess.len(),
                    sys.n()
                ));
            }
            if leg.j_in >= m {
                issues.push(format!("leg {}: j_in {} out of range", i + 1, leg.j_in + 1));
                continue;
            }
            for (j, &zj) in leg.z.iter().enumerate() {
                if face_sign(zj, sys.z_bounds()[j]).is_none() {
                    issues.push(format!(
                        "leg {}: z[{}] = {zj} is not a finite bound of component {}",
                        i + 1,
                        j + 1,
                        j + 1
                    ));
                }
            }
        }
        if !issues.is_empty() {
            return issues;
        }
        for i in 0..self.len() {
            let (prev, cur) = (self.prev(i), self.leg(i));
            let differing: Vec<usize> = (0..m).filter(|&j| prev.z[j] != cur.z[j]).collect();
            if differing.len() > 1 || differing.iter().any(|&j| j != cur.j_in) {
                issues.push(format!(
                    "legs {} -> {}: z {:?} -> {:?} differ outside the jumping component {}",
                    (i + self.len() - 1) % self.len() + 1,
                    i + 1,
                    prev.z,
                    cur.z,
                    cur.j_in + 1
                ));
            }
        }
        for j in 0..m {
            if !self.legs.iter().any(|l| l.j_in == j) {
                issues.push(format!("fast component {} never jumps", j + 1));
            }
        }
        issues
    }
}

/// `+1` when `value` is the lower bound, `-1` when it is the upper bound.
pub fn face_sign(value: f64, (lo, hi): (f64, f64)) -> Option<f64> {
    if !value.is_finite() {
        None
    } else if value == lo {
        Some(1.0)
    } else if value == hi {
        Some(-1.0)
    } else {
        None
    }
}

/// `p' = f(p, z_leg, 0)`.
pub struct SlowField<'a> {
    pub sys: &'a dyn SlowFastSystem,
    pub z: Vec<f64>,
}

pub fn slow_field<'a>(sys: &'a dyn SlowFastSystem, leg: &LegSpec) -> SlowField<'a> {
    SlowField {
        sys,
        z: leg.z.clone(),
    }
}

impl VectorField for SlowField<'_> {
    fn dim(&self) -> usize {
        self.sys.n()
    }
    fn eval(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        self.sys.f(y, &self.z, 0.0, dy);
    }
}

/// `(p, z)' = (h, g)` at ε = 0.
pub struct FastField<'a> {
    pub sys: &'a dyn SlowFastSystem,
}

pub fn fast_field(sys: &dyn SlowFastSystem) -> FastField<'_> {
    FastField { sys }
}

impl VectorField for FastField<'_> {
    fn dim(&self) -> usize {
        self.sys.n() + self.sys.m()
    }
    fn eval(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.sys.n();
        let (p, z) = y.split_at(n);
        let (dp, dz) = dy.split_at_mut(n);
        self.sys.h(p, z, 0.0, dp);
        self.sys.g(p, z, 0.0, dz);
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AssumptionCheck {
    pub assumption: u8,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn push(&mut self, assumption: u8, passed: bool, detail: impl Into<String>) {
        self.checks.push(AssumptionCheck {
            assumption,
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn passed(&self, assumption: u8) -> bool {
        self.checks
            .iter()
            .filter(|c| c.assumption == assumption)
            .all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn extend(&mut self, other: AssumptionReport) {
        self.checks.extend(other.checks);
    }
}

/// Sampling density for the boundary-vanishing check.
#[derive(Debug, Clone, Copy)]
pub struct SampleGrid {
    pub points_per_axis: usize,
    pub tol: f64,
}

impl Default for SampleGrid {
    fn default() -> Self {
        SampleGrid {
            points_per_axis: 10,
            tol: 1e-10,
        }
    }
}

/// Gaps between the interior sign pattern and zero below this are treated as
/// touching zero.
const A5_MARGIN: f64 = 1e-12;

pub fn check_assumptions(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    orbit: Option<&SingularOrbit>,
) -> AssumptionReport {
    check_assumptions_with(sys, chain, orbit, SampleGrid::default())
}

pub fn check_assumptions_with(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    orbit: Option<&SingularOrbit>,
    grid: SampleGrid,
) -> AssumptionReport {
    let mut report = AssumptionReport::default();
    let issues = chain.structure_issues(sys);
    if issues.is_empty() {
        report.push(2, true, format!("{} legs form a closed configuration", chain.len()));
    } else {
        for issue in issues {
            report.push(2, false, issue);
        }
        return report;
    }

    let (lo, hi) = match orbit {
        Some(o) => bounding_box(o.legs.iter().flat_map(|l| {
            (0..l.trajectory.len()).map(move |k| &l.trajectory.state(k)[..sys.n()])
        })),
        None => {
            let (lo, hi) = bounding_box(chain.legs.iter().map(|l| l.a_guess.as_slice()));
            (
                lo.iter().map(|v| v - 1.0).collect(),
                hi.iter().map(|v| v + 1.0).collect(),
            )
        }
    };
    check_boundary_vanishing(sys, &lo, &hi, grid, &mut report);

    if let Some(orbit) = orbit {
        check_orbit(sys, chain, orbit, &mut report);
    }
    report
}

fn bounding_box<'a>(points: impl Iterator<Item = &'a [f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut lo: Vec<f64> = Vec::new();
    let mut hi: Vec<f64> = Vec::new();
    for p in points {
        if lo.is_empty() {
            lo = p.to_vec();
            hi = p.to_vec();
        }
        for k in 0..p.len() {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn axis_samples(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 || hi <= lo {
        return vec![0.5 * (lo + hi)];
    }
    (0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect()
}

// Values a fast component takes while another one sits on a face.
fn fast_samples((lo, hi): (f64, f64)) -> Vec<f64> {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => vec![lo, 0.5 * (lo + hi), hi],
        (true, false) => vec![lo, lo + 0.5, lo + 1.0],
        (false, true) => vec![hi - 1.0, hi - 0.5, hi],
        (false, false) => vec![-1.0, 0.0, 1.0],
    }
}

fn check_boundary_vanishing(
    sys: &dyn SlowFastSystem,
    lo: &[f64],
    hi: &[f64],
    grid: SampleGrid,
    report: &mut AssumptionReport,
) {
    let n = sys.n();
    let m = sys.m();
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|k| axis_samples(lo[k], hi[k], grid.points_per_axis))
        .collect();
    let mut worst = 0.0f64;
    let mut witness = String::new();
    let (mut gout, mut hout) = (vec![0.0; m], vec![0.0; n]);
    let mut p = vec![0.0; n];
    let total: usize = axes.iter().map(|a| a.len()).product();
    for j in 0..m {
        let (zlo, zhi) = sys.z_bounds()[j];
        for face in [zlo, zhi].into_iter().filter(|v| v.is_finite()) {
            let others: Vec<Vec<f64>> = (0..m)
                .map(|k| {
                    if k == j {
                        vec![face]
                    } else {
                        fast_samples(sys.z_bounds()[k])
                    }
                })
                .collect();
            let zcount: usize = others.iter().map(|a| a.len()).product();
            for pi in 0..total {
                let mut r = pi;
                for k in 0..n {
                    p[k] = axes[k][r % axes[k].len()];
                    r /= axes[k].len();
                }
                for zi in 0..zcount {
                    let mut r = zi;
                    let z: Vec<f64> = others
                        .iter()
                        .map(|a| {
                            let v = a[r % a.len()];
                            r /= a.len();
                            v
                        })
                        .collect();
                    for eps in [0.0, 0.01] {
                        sys.g(&p, &z, eps, &mut gout);
                        sys.h(&p, &z, eps, &mut hout);
                        let res = hout.iter().fold(gout[j].abs(), |a, v| a.max(v.abs()));
                        if !(res <= worst) {
                            worst = if res.is_nan() { f64::INFINITY } else { res };
                            witness = format!("p = {p:?}, z = {z:?}, eps = {eps}");
                        }
                    }
                }
            }
        }
    }
    if worst <= grid.tol {
        report.push(1, true, format!("max boundary residual {worst:.3e}"));
    } else {
        report.push(
            1,
            false,
            format!("boundary residual {worst:.3e} exceeds {:.0e} at {witness}", grid.tol),
        );
    }
}

fn check_orbit(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    orbit: &SingularOrbit,
    report: &mut AssumptionReport,
) {
    let n = sys.n();
    let mut fa = vec![0.0; n];
    for (i, leg) in orbit.legs.iter().enumerate() {
        let spec = chain.leg(i);
        sys.f(&leg.entry_p, &spec.z, 0.0, &mut fa);
        let speed = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.push(
            3,
            speed > 1e-10 && leg.tau > 0.0,
            format!(
                "leg {}: |f(A)| = {speed:.3e}, transit time {:.6}",
                i + 1,
                leg.tau
            ),
        );
        let j_in = spec.j_in;
        let j_out = chain.j_out(i);
        let ga = sys.gz(j_in, &leg.entry_p, &spec.z, 0.0);
        let gb = sys.gz(j_out, &leg.exit_p, &spec.z, 0.0);
        report.push(
            4,
            ga < 0.0 && gb > 0.0,
            format!(
                "leg {}: gz[{}](A) = {ga:.6e} (landing), gz[{}](B) = {gb:.6e} (exit)",
                i + 1,
                j_in + 1,
                j_out + 1
            ),
        );
        report.push(5, leg.a5_violation.is_none(), a5_detail(i, leg));
    }
}

fn a5_detail(i: usize, leg: &crate::entry_exit::LegTransit) -> String {
    match leg.a5_violation {
        None => format!("leg {}: delays nonzero in the interior", i + 1),
        Some((j, t)) => format!(
            "leg {}: delay of component {} reaches zero at tau = {t:.6}",
            i + 1,
            j + 1
        ),
    }
}

/// First interior knot where a delay component violates the sign pattern:
/// every component strictly negative after the dead-band, the exiting one up
/// to the final knot only.
pub(crate) fn interior_delay_violation(
    traj: &crate::ode::Trajectory,
    n: usize,
    j_out: usize,
    dead_band: f64,
) -> Option<(usize, f64)> {
    let t0 = traj.t_start();
    let last = traj.len() - 1;
    for k in 1..traj.len() {
        let t = traj.times()[k];
        if t - t0 <= dead_band {
            continue;
        }
        let d = &traj.state(k)[n..];
        for (j, &dj) in d.iter().enumerate() {
            if j == j_out && k == last {
                continue;
            }
            if dj >= -A5_MARGIN {
                return Some((j, t - t0));
            }
        }
    }
    None
}
