//! Direct simulation of the full system at ε > 0 and comparison of the
//! resulting attractor with the singular orbit.
//!
//! Fast components are integrated in logistic (or logarithmic) charts so
//! that states exponentially close to a face stay representable.

use std::thread;

use crate::entry_exit::{GL_NODES, GL_WEIGHTS};
use crate::ode::{field, integrate_with, OdeError, Options, Tolerances, Trajectory};
use crate::orbit::SingularOrbit;
use crate::system::{ManifoldChain, SlowFastSystem};

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    #[error("invalid initial state: {0}")]
    InvalidInit(String),
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error(
        "step size underflow at tau = {t} (eps = {eps}); \
         try continuing from a larger eps and reducing it gradually"
    )]
    StepUnderflow { t: f64, eps: f64 },
    #[error("trajectory left the state box at tau = {t}")]
    Escape { t: f64 },
    #[error("eps = {eps}: {detail}")]
    NoCycle { eps: f64, detail: String },
    #[error("eps list must be non-empty and strictly descending")]
    EpsList,
    #[error(transparent)]
    Ode(OdeError),
}

#[derive(Debug, Clone, Copy)]
enum Chart {
    Free,
    Interval { lo: f64, hi: f64 },
    Above { lo: f64 },
    Below { hi: f64 },
}

impl Chart {
    fn new((lo, hi): (f64, f64)) -> Chart {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => Chart::Interval { lo, hi },
            (true, false) => Chart::Above { lo },
            (false, true) => Chart::Below { hi },
            (false, false) => Chart::Free,
        }
    }

    fn to_chart(self, z: f64) -> Option<f64> {
        let u = match self {
            Chart::Free => z,
            Chart::Interval { lo, hi } => ((z - lo) / (hi - z)).ln(),
            Chart::Above { lo } => (z - lo).ln(),
            Chart::Below { hi } => (hi - z).ln(),
        };
        u.is_finite().then_some(u)
    }

    /// `z` together with its distances to the lower and upper bound.
    fn from_chart(self, u: f64) -> (f64, f64, f64) {
        match self {
            Chart::Free => (u, f64::INFINITY, f64::INFINITY),
            Chart::Interval { lo, hi } => {
                let w = hi - lo;
                let (a, b) = if u >= 0.0 {
                    let e = (-u).exp();
                    (w / (1.0 + e), w * e / (1.0 + e))
                } else {
                    let e = u.exp();
                    (w * e / (1.0 + e), w / (1.0 + e))
                };
                if a <= b {
                    (lo + a, a, b)
                } else {
                    (hi - b, a, b)
                }
            }
            Chart::Above { lo } => {
                let a = u.exp();
                (lo + a, a, f64::INFINITY)
            }
            Chart::Below { hi } => {
                let b = u.exp();
                (hi - b, f64::INFINITY, b)
            }
        }
    }
}

/// Simulated trajectory in slow time; fast components are stored in
/// their charts and converted on access.
#[derive(Debug, Clone)]
pub struct SimTrajectory {
    n: usize,
    charts: Vec<Chart>,
    pub eps: f64,
    raw: Trajectory,
}

impl SimTrajectory {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.dim()
    }

    pub fn times(&self) -> &[f64] {
        self.raw.times()
    }

    pub fn t_end(&self) -> f64 {
        self.raw.t_end()
    }

    fn convert(&self, y: &mut [f64]) {
        for (j, c) in self.charts.iter().enumerate() {
            y[self.n + j] = c.from_chart(y[self.n + j]).0;
        }
    }

    pub fn state(&self, k: usize) -> Vec<f64> {
        let mut y = self.raw.state(k).to_vec();
        self.convert(&mut y);
        y
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut y = self.raw.eval(t);
        self.convert(&mut y);
        y
    }

    /// Underlying integration with fast components in chart coordinates.
    pub fn raw(&self) -> &Trajectory {
        &self.raw
    }

    /// Knots in `[t0, t1]` with `refine - 1` interpolated points between
    /// consecutive knots, endpoints included.
    pub fn dense_samples(&self, t0: f64, t1: f64, refine: usize) -> Vec<(f64, Vec<f64>)> {
        let times = self.times();
        let mut out = vec![(t0, self.eval(t0))];
        let mut prev = t0;
        let mut knots: Vec<f64> = times.iter().copied().filter(|&t| t > t0 && t < t1).collect();
        knots.push(t1);
        for t in knots {
            for r in 1..=refine.max(1) {
                let s = prev + (t - prev) * r as f64 / refine.max(1) as f64;
                out.push((s, self.eval(s)));
            }
            prev = t;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub tol: Tolerances,
    pub max_steps: usize,
    pub state_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            tol: Tolerances::new(1e-9, 1e-11),
            max_steps: 5_000_000,
            state_bound: 1e8,
        }
    }
}

// Divided difference `g_j(z) / (z_j - b)` for a face `b` with `g_j = 0`.
fn divided(sys: &dyn SlowFastSystem, j: usize, p: &[f64], z: &mut [f64], b: f64, dz: f64) -> f64 {
    let keep = z[j];
    let mut acc = 0.0;
    for (s, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        z[j] = b + s * dz;
        acc += w * sys.gz(j, p, z, 0.0);
    }
    z[j] = keep;
    acc
}

const NEAR_FACE: f64 = 1e-3;

/// Integrate `p' = f + h/ε`, `z' = g/ε` in slow time from `init = (p, z)`.
pub fn run(
    sys: &dyn SlowFastSystem,
    eps: f64,
    init: &[f64],
    t_max: f64,
    opts: &SimOptions,
) -> Result<SimTrajectory, SimError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SimError::InvalidEps(eps));
    }
    let (n, m) = (sys.n(), sys.m());
    if init.len() != n + m {
        return Err(SimError::InvalidInit(format!(
            "expected {} components, got {}",
            n + m,
            init.len()
        )));
    }
    let charts: Vec<Chart> = sys.z_bounds().iter().map(|&b| Chart::new(b)).collect();
    let mut y0 = init[..n].to_vec();
    for j in 0..m {
        let u = charts[j].to_chart(init[n + j]).ok_or_else(|| {
            SimError::InvalidInit(format!(
                "fast component {} = {} is not strictly inside its bounds",
                j + 1,
                init[n + j]
            ))
        })?;
        y0.push(u);
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(SimError::InvalidInit("non-finite component".into()));
    }
    let vf = field(n + m, |_, y: &[f64], dy: &mut [f64]| {
        let p = &y[..n];
        let mut z = vec![0.0; m];
        let mut gaps = vec![(0.0, 0.0); m];
        for j in 0..m {
            let (zj, a, b) = charts[j].from_chart(y[n + j]);
            z[j] = zj;
            gaps[j] = (a, b);
        }
        let mut h = vec![0.0; n];
        sys.f(p, &z, eps, &mut dy[..n]);
        sys.h(p, &z, eps, &mut h);
        for i in 0..n {
            dy[i] += h[i] / eps;
        }
        let mut g = vec![0.0; m];
        sys.g(p, &z, eps, &mut g);
        for j in 0..m {
            let (a, b) = gaps[j];
            let rate = match charts[j] {
                Chart::Free => g[j],
                Chart::Above { lo } => {
                    if a < NEAR_FACE {
                        divided(sys, j, p, &mut z, lo, a)
                    } else {
                        g[j] / a
                    }
                }
                Chart::Below { hi } => {
                    if b < NEAR_FACE {
                        divided(sys, j, p, &mut z, hi, -b)
                    } else {
                        -g[j] / b
                    }
                }
                Chart::Interval { lo, hi } => {
                    let w = hi - lo;
                    let band = NEAR_FACE * w.min(1.0);
                    if a < band {
                        divided(sys, j, p, &mut z, lo, a) * w / b
                    } else if b < band {
                        -divided(sys, j, p, &mut z, hi, -b) * w / a
                    } else {
                        g[j] * w / (a * b)
                    }
                }
            };
            dy[n + j] = rate / eps;
        }
    });
    let ode = Options {
        tol: opts.tol,
        max_steps: opts.max_steps,
        state_bound: opts.state_bound,
        ..Options::default()
    };
    let raw = integrate_with(&vf, &y0, (0.0, t_max), &ode).map_err(|e| match e {
        OdeError::StepUnderflow { t, .. } => SimError::StepUnderflow { t, eps },
        OdeError::Escape { t, .. } => SimError::Escape { t },
        other => SimError::Ode(other),
    })?;
    Ok(SimTrajectory {
        n,
        charts,
        eps,
        raw,
    })
}

/// Singular orbit as a closed polyline in `(p, z)`: every leg followed by
/// the fast jump out of it.
pub fn singular_polyline(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    orbit: &SingularOrbit,
    per_leg: usize,
) -> Vec<Vec<f64>> {
    let n = sys.n();
    let mut pts = Vec::new();
    for (i, leg) in orbit.legs.iter().enumerate() {
        let z = &chain.leg(i).z;
        let tr = &leg.trajectory;
        let mut times: Vec<f64> = tr.times().to_vec();
        for k in 0..per_leg {
            times.push(tr.t_end() * k as f64 / per_leg as f64);
        }
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        for t in times {
            let mut y = tr.eval(t)[..n].to_vec();
            y.extend_from_slice(z);
            pts.push(y);
        }
        let jump = &orbit.jumps[i];
        let next = chain.leg(i + 1);
        if let Some(jt) = &jump.trajectory {
            let j = next.j_in;
            for k in 0..jt.len() {
                let s = jt.state(k);
                let mut y = s[..n].to_vec();
                let mut zz = z.clone();
                zz[j] = s[n];
                y.extend(zz);
                pts.push(y);
            }
        }
        let mut land = jump.landing_p.clone();
        land.extend_from_slice(&next.z);
        pts.push(land);
    }
    if let Some(first) = pts.first().cloned() {
        pts.push(first);
    }
    pts
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Polyline resampled to `count` points equally spaced in arc length.
pub fn resample(poly: &[Vec<f64>], count: usize) -> Vec<Vec<f64>> {
    if poly.len() < 2 || count < 2 {
        return poly.iter().take(count).cloned().collect();
    }
    let mut cum = vec![0.0];
    for w in poly.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![poly[0].clone(); count];
    }
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = total * k as f64 / (count - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let r = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(
            poly[seg]
                .iter()
                .zip(&poly[seg + 1])
                .map(|(a, b)| a + r * (b - a))
                .collect(),
        );
    }
    out
}

fn point_segment(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut ab2 = 0.0;
    let mut dot = 0.0;
    for k in 0..x.len() {
        ab2 += (b[k] - a[k]).powi(2);
        dot += (x[k] - a[k]) * (b[k] - a[k]);
    }
    let r = if ab2 > 0.0 { (dot / ab2).clamp(0.0, 1.0) } else { 0.0 };
    x.iter()
        .zip(a.iter().zip(b))
        .map(|(xi, (ai, bi))| (xi - ai - r * (bi - ai)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distance from a point to a polyline.
pub fn distance_to_polyline(x: &[f64], poly: &[Vec<f64>]) -> f64 {
    match poly.len() {
        0 => f64::INFINITY,
        1 => dist(x, &poly[0]),
        _ => poly
            .windows(2)
            .map(|w| point_segment(x, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// `max_{a in from} dist(a, to)` with `to` read as a polyline.
pub fn directed_hausdorff(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|a| distance_to_polyline(a, to))
        .fold(0.0, f64::max)
}

/// Hyperplane through `point` normal to `normal`, restricted to states
/// whose fast part is near `z_face`.
#[derive(Debug, Clone)]
pub struct Section {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub z_face: Vec<f64>,
    pub z_radius: f64,
}

impl Section {
    /// Section through the point halfway (in slow time) along the first
    /// leg, normal to the slow flow there.
    pub fn on_first_leg(sys: &dyn SlowFastSystem, chain: &ManifoldChain, orbit: &SingularOrbit) -> Section {
        let n = sys.n();
        let tr = &orbit.legs[0].trajectory;
        let point = tr.eval(0.5 * tr.t_end())[..n].to_vec();
        let z1 = chain.leg(0).z.clone();
        let mut normal = vec![0.0; n];
        sys.f(&point, &z1, 0.0, &mut normal);
        let width = sys
            .z_bounds()
            .iter()
            .map(|(lo, hi)| (hi - lo).min(1.0))
            .fold(1.0, f64::min);
        Section {
            point,
            normal,
            z_face: z1,
            z_radius: 0.1 * width,
        }
    }

    fn value(&self, y: &[f64]) -> f64 {
        self.point
            .iter()
            .zip(&self.normal)
            .enumerate()
            .map(|(i, (a, f))| (y[i] - a) * f)
            .sum()
    }

    fn admits(&self, y: &[f64]) -> bool {
        let n = self.point.len();
        self.z_face
            .iter()
            .enumerate()
            .all(|(j, z)| (y[n + j] - z).abs() < self.z_radius)
    }
}

#[derive(Debug, Clone)]
pub struct SectionHit {
    pub t: f64,
    pub state: Vec<f64>,
}

/// Transverse crossings of `section` in the direction of the slow flow.
pub fn section_hits(traj: &SimTrajectory, section: &Section) -> Vec<SectionHit> {
    let mut hits = Vec::new();
    let times = traj.times();
    let mut prev = section.value(&traj.state(0));
    for k in 1..times.len() {
        let y = traj.state(k);
        let cur = section.value(&y);
        if prev < 0.0 && cur >= 0.0 {
            let (mut a, mut b) = (times[k - 1], times[k]);
            for _ in 0..100 {
                let mid = 0.5 * (a + b);
                if section.value(&traj.eval(mid)) < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a < 1e-13 * (1.0 + b.abs()) {
                    break;
                }
            }
            let state = traj.eval(b);
            if section.admits(&state) {
                hits.push(SectionHit { t: b, state });
            }
        }
        prev = cur;
    }
    hits
}

/// Mean ratio of successive return displacements over the last `window`
/// returns; below one when the returns contract.
pub fn return_contraction(hits: &[SectionHit], window: usize) -> Option<f64> {
    if hits.len() < window + 2 {
        return None;
    }
    let tail = &hits[hits.len() - window - 2..];
    let steps: Vec<f64> = tail.windows(2).map(|w| dist(&w[0].state, &w[1].state)).collect();
    let ratios: Vec<f64> = steps.windows(2).map(|w| w[1] / w[0]).collect();
    Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Times and states where fast component `j` crosses `level`.
pub fn fast_crossings(traj: &SimTrajectory, j: usize, level: f64, rising: bool) -> Vec<SectionHit> {
    let n = traj.n;
    let sgn = if rising { 1.0 } else { -1.0 };
    let mut out = Vec::new();
    let times = traj.times();
    let mut prev = sgn * (traj.state(0)[n + j] - level);
    for k in 1..times.len() {
        let cur = sgn * (traj.state(k)[n + j] - level);
        if prev < 0.0 && cur >= 0.0 {
            let (mut a, mut b) = (times[k - 1], times[k]);
            while b - a > 1e-13 * (1.0 + b.abs()) {
                let mid = 0.5 * (a + b);
                if sgn * (traj.eval(mid)[n + j] - level) < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            out.push(SectionHit {
                t: b,
                state: traj.eval(b),
            });
        }
        prev = cur;
    }
    out
}

/// First knot time at which the trajectory is farther than `radius` from
/// the polyline.
pub fn first_departure(traj: &SimTrajectory, poly: &[Vec<f64>], radius: f64) -> Option<f64> {
    (0..traj.len()).find_map(|k| {
        (distance_to_polyline(&traj.state(k), poly) > radius).then(|| traj.times()[k])
    })
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub t_max: f64,
    /// Transient discarded before cycle extraction; defaults to `t_max / 2`.
    pub t_burn: Option<f64>,
    pub samples: usize,
    /// Largest accepted distance between the last two section hits.
    pub recurrence_tol: f64,
    /// Distance to a face counted as "on the face" for occupancy.
    pub face_band: f64,
    pub sim: SimOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            t_max: 200.0,
            t_burn: None,
            samples: 1000,
            recurrence_tol: 1e-2,
            face_band: 0.05,
            sim: SimOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyRow {
    pub eps: f64,
    /// Directed Hausdorff distance from the simulated cycle to the
    /// singular orbit.
    pub distance: f64,
    /// Directed distance the other way round.
    pub reverse_distance: f64,
    pub period: f64,
    pub section_hits: usize,
    /// Fraction of the cycle each fast component spends within
    /// `face_band` of a face.
    pub face_occupancy: Vec<f64>,
    pub cycle: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
}

impl ConvergenceStudy {
    pub fn distances(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.distance).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].distance < w[0].distance)
    }
}

fn face_occupancy(traj: &SimTrajectory, sys: &dyn SlowFastSystem, t0: f64, t1: f64, band: f64) -> Vec<f64> {
    let n = sys.n();
    let bounds = sys.z_bounds();
    let count = 5000;
    let mut near = vec![0usize; sys.m()];
    for k in 0..count {
        let t = t0 + (t1 - t0) * (k as f64 + 0.5) / count as f64;
        let y = traj.eval(t);
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            let z = y[n + j];
            if (z - lo).abs() < band || (hi - z).abs() < band {
                near[j] += 1;
            }
        }
    }
    near.iter().map(|&c| c as f64 / count as f64).collect()
}

/// Final attracting cycle of one run, or the reason none was found.
pub fn extract_cycle(
    sys: &dyn SlowFastSystem,
    traj: &SimTrajectory,
    section: &Section,
    opts: &StudyOptions,
) -> Result<(f64, f64, usize), SimError> {
    let burn = opts.t_burn.unwrap_or(0.5 * opts.t_max);
    let hits: Vec<SectionHit> = section_hits(traj, section)
        .into_iter()
        .filter(|h| h.t >= burn)
        .collect();
    let _ = sys;
    if hits.len() < 2 {
        return Err(SimError::NoCycle {
            eps: traj.eps,
            detail: format!("{} section returns after burn-in", hits.len()),
        });
    }
    let (a, b) = (&hits[hits.len() - 2], &hits[hits.len() - 1]);
    let gap = dist(&a.state, &b.state);
    if gap > opts.recurrence_tol {
        return Err(SimError::NoCycle {
            eps: traj.eps,
            detail: format!("last two section returns differ by {gap:.3e}"),
        });
    }
    Ok((a.t, b.t, hits.len()))
}

fn study_one(
    sys: &dyn SlowFastSystem,
    section: &Section,
    target: &[Vec<f64>],
    eps: f64,
    init: &[f64],
    opts: &StudyOptions,
) -> Result<StudyRow, SimError> {
    let traj = run(sys, eps, init, opts.t_max, &opts.sim)?;
    let (t0, t1, count) = extract_cycle(sys, &traj, section, opts)?;
    let raw: Vec<Vec<f64>> = traj.dense_samples(t0, t1, 4).into_iter().map(|(_, y)| y).collect();
    let cycle = resample(&raw, opts.samples);
    Ok(StudyRow {
        eps,
        distance: directed_hausdorff(&cycle, target),
        reverse_distance: directed_hausdorff(target, &cycle),
        period: t1 - t0,
        section_hits: count,
        face_occupancy: face_occupancy(&traj, sys, t0, t1, opts.face_band),
        cycle,
    })
}

/// Simulate each ε (concurrently), extract the final cycle and measure its
/// distance to the singular orbit. Rows follow the order of `eps_list`.
pub fn convergence_study(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    orbit: &SingularOrbit,
    eps_list: &[f64],
    init: &[f64],
    opts: &StudyOptions,
) -> Result<ConvergenceStudy, SimError> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(SimError::EpsList);
    }
    let section = Section::on_first_leg(sys, chain, orbit);
    let target = resample(&singular_polyline(sys, chain, orbit, 200), opts.samples);
    let results: Vec<Result<StudyRow, SimError>> = thread::scope(|s| {
        let handles: Vec<_> = eps_list
            .iter()
            .map(|&eps| {
                let (section, target) = (&section, &target);
                s.spawn(move || study_one(sys, section, target, eps, init, opts))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ConvergenceStudy { rows })
}
