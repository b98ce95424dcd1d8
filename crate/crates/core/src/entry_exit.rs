//! Slow-leg transit maps with delay bookkeeping, fast jump maps, and their
//! Jacobians.
//!
//! Delay convention: `d^(j)` is the integral of `∂g^(j)/∂z^(j)` along the
//! slow legs since component `j` last jumped. It is zero right after the
//! jump, negative while the manifold is attracting in that direction, and
//! component `j` leaves when `d^(j)` climbs back through zero.

use nalgebra::{DMatrix, DVector};

use crate::ode::{
    field, integrate_until_with, integrate_with, Direction, EventSpec, OdeError, Options,
    Tolerances, Trajectory,
};
use crate::system::{face_sign, interior_delay_violation, ManifoldChain, SlowFastSystem};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: Tolerances,
    /// Slow-time horizon per leg and fast-time horizon per jump.
    pub t_max: f64,
    pub dead_band: f64,
    /// Fast orbits leaving `|p| <= jump_box` count as escaped.
    pub jump_box: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: Tolerances::new(1e-11, 1e-13),
            t_max: 1e4,
            dead_band: 1e-8,
            jump_box: 1e6,
        }
    }
}

impl SolverOptions {
    fn ode(&self) -> Options {
        Options {
            tol: self.tol,
            ..Options::default()
        }
    }
}

/// Smallest admissible `|gz|` at a leg endpoint.
pub const GZ_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, thiserror::Error)]
pub enum EntryExitError {
    #[error("leg {}: {reason}", .leg + 1)]
    Precondition { leg: usize, reason: String },
    #[error("leg {}: delay of component {} never returns to zero before t = {t_max}", .leg + 1, .component + 1)]
    NoExit {
        leg: usize,
        component: usize,
        t_max: f64,
        trajectory: Box<Trajectory>,
    },
    #[error("jump into leg {}: exit point is not repelling (gz = {gz:.3e})", .leg + 1)]
    NotRepelling { leg: usize, gz: f64 },
    #[error("jump into leg {}: fast orbit does not reach the target face ({source})", .leg + 1)]
    NoHeteroclinic {
        leg: usize,
        #[source]
        source: OdeError,
    },
    #[error("leg {}: |gz| = {value:.3e} at the {at} point is below the guard", .leg + 1)]
    DegenerateGz {
        leg: usize,
        at: &'static str,
        value: f64,
    },
    #[error("leg {}: integration failed ({source})", .leg + 1)]
    Ode {
        leg: usize,
        #[source]
        source: OdeError,
    },
}

/// Result of following one slow leg until its outgoing component exits.
#[derive(Debug, Clone)]
pub struct LegTransit {
    pub leg: usize,
    pub tau: f64,
    pub entry_p: Vec<f64>,
    pub entry_d: Vec<f64>,
    pub exit_p: Vec<f64>,
    pub exit_d: Vec<f64>,
    /// Event residual of the exiting delay before it was pinned to zero.
    pub exit_residual: f64,
    /// Dense `(p, d)` trajectory in slow time starting at 0.
    pub trajectory: Trajectory,
    /// `(component, tau)` where a delay touched zero too early.
    pub a5_violation: Option<(usize, f64)>,
}

fn leg_field<'a>(
    sys: &'a dyn SlowFastSystem,
    z: &'a [f64],
) -> impl crate::ode::VectorField + 'a {
    let n = sys.n();
    let m = sys.m();
    field(n + m, move |_, y: &[f64], dy: &mut [f64]| {
        let (p, _) = y.split_at(n);
        sys.f(p, z, 0.0, &mut dy[..n]);
        for j in 0..m {
            dy[n + j] = sys.gz(j, p, z, 0.0);
        }
    })
}

pub fn transit_leg(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    entry_p: &[f64],
    entry_d: &[f64],
    opts: &SolverOptions,
) -> Result<LegTransit, EntryExitError> {
    let n = sys.n();
    let m = sys.m();
    let spec = chain.leg(leg);
    let pre = |reason: String| EntryExitError::Precondition { leg, reason };
    if entry_p.len() != n || entry_d.len() != m {
        return Err(pre(format!(
            "entry has dimensions ({}, {}), expected ({n}, {m})",
            entry_p.len(),
            entry_d.len()
        )));
    }
    if entry_d[spec.j_in].abs() > 1e-12 {
        return Err(pre(format!(
            "delay of the just-jumped component {} is {:e}, expected 0",
            spec.j_in + 1,
            entry_d[spec.j_in]
        )));
    }
    let k = chain.j_out(leg);
    let gz_k = sys.gz(k, entry_p, &spec.z, 0.0);
    if !(gz_k < 0.0 || entry_d[k] < 0.0) {
        return Err(pre(format!(
            "component {} is neither attracting (gz = {gz_k:.3e}) nor holding delay credit",
            k + 1
        )));
    }
    let mut y0 = entry_p.to_vec();
    y0.extend_from_slice(entry_d);
    y0[n + spec.j_in] = 0.0;

    let f = leg_field(sys, &spec.z);
    let mut ev = EventSpec::new(move |_, y: &[f64]| y[n + k], Direction::Rising)
        .with_dead_band(opts.dead_band);
    ev.g_tol = 1e-13;
    ev.t_tol = 1e-12;
    let hit = match integrate_until_with(&f, &y0, 0.0, &ev, opts.t_max, &opts.ode()) {
        Ok(hit) => hit,
        Err(OdeError::NoEvent { t_max, trajectory }) => {
            return Err(EntryExitError::NoExit {
                leg,
                component: k,
                t_max,
                trajectory,
            })
        }
        Err(source) => return Err(EntryExitError::Ode { leg, source }),
    };
    let exit_p = hit.y[..n].to_vec();
    let mut exit_d = hit.y[n..].to_vec();
    let exit_residual = exit_d[k];
    exit_d[k] = 0.0;
    let a5_violation = interior_delay_violation(&hit.trajectory, n, k, opts.dead_band);
    Ok(LegTransit {
        leg,
        tau: hit.t,
        entry_p: entry_p.to_vec(),
        entry_d: y0[n..].to_vec(),
        exit_p,
        exit_d,
        exit_residual,
        trajectory: hit.trajectory,
        a5_violation,
    })
}

/// Section coordinates entering leg `i`: p, then delays except `J_in(i)`.
pub fn entry_delay_slots(chain: &ManifoldChain, m: usize, leg: usize) -> Vec<usize> {
    let j = chain.leg(leg).j_in;
    (0..m).filter(|&k| k != j).collect()
}

/// Section coordinates leaving leg `i`: p, then delays except `J_out(i)`.
pub fn exit_delay_slots(chain: &ManifoldChain, m: usize, leg: usize) -> Vec<usize> {
    let j = chain.j_out(leg);
    (0..m).filter(|&k| k != j).collect()
}

#[derive(Debug, Clone)]
pub struct LegJacobian {
    /// Fundamental matrix of the linearised slow flow at the exit time.
    pub l: DMatrix<f64>,
    /// Sensitivity of the exiting delay integral to the entry point.
    pub mu: DVector<f64>,
    /// Same sensitivity for every delay component, one row per component.
    pub mu_all: DMatrix<f64>,
    pub dq: DMatrix<f64>,
    pub dqhat: DMatrix<f64>,
    /// `gz(J_out)` at entry and exit.
    pub gz_entry: f64,
    pub gz_exit: f64,
    pub f_entry: DVector<f64>,
    pub f_exit: DVector<f64>,
}

pub fn leg_jacobian(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    transit: &LegTransit,
    opts: &SolverOptions,
) -> Result<LegJacobian, EntryExitError> {
    let n = sys.n();
    let m = sys.m();
    let leg = transit.leg;
    let spec = chain.leg(leg);
    let z = &spec.z;
    let k = chain.j_out(leg);

    // state: p, L (n×n), M (m×n) with M' = (∂gz/∂p) L
    let dim = n + n * n + m * n;
    let aug = field(dim, |_, y: &[f64], dy: &mut [f64]| {
        let p = &y[..n];
        sys.f(p, z, 0.0, &mut dy[..n]);
        let a = sys.df_dp(p, z, 0.0);
        let l = DMatrix::from_column_slice(n, n, &y[n..n + n * n]);
        let dl = &a * &l;
        dy[n..n + n * n].copy_from_slice(dl.as_slice());
        let mut grad = vec![0.0; n];
        let mut gmat = DMatrix::zeros(m, n);
        for j in 0..m {
            sys.dgz_dp(j, p, z, 0.0, &mut grad);
            for c in 0..n {
                gmat[(j, c)] = grad[c];
            }
        }
        let dm = gmat * l;
        dy[n + n * n..].copy_from_slice(dm.as_slice());
    });
    let mut y0 = vec![0.0; dim];
    y0[..n].copy_from_slice(&transit.entry_p);
    for c in 0..n {
        y0[n + c * n + c] = 1.0;
    }
    let tr = integrate_with(&aug, &y0, (0.0, transit.tau), &opts.ode())
        .map_err(|source| EntryExitError::Ode { leg, source })?;
    let end = tr.last_state();
    let l = DMatrix::from_column_slice(n, n, &end[n..n + n * n]);
    let mu_all = DMatrix::from_column_slice(m, n, &end[n + n * n..]);

    let b = &transit.exit_p;
    let gz_b: Vec<f64> = (0..m).map(|j| sys.gz(j, b, z, 0.0)).collect();
    let gz_a = sys.gz(k, &transit.entry_p, z, 0.0);
    if gz_b[k].abs() < GZ_GUARD {
        return Err(EntryExitError::DegenerateGz {
            leg,
            at: "exit",
            value: gz_b[k],
        });
    }
    let mut fb = vec![0.0; n];
    sys.f(b, z, 0.0, &mut fb);
    let mut fa = vec![0.0; n];
    sys.f(&transit.entry_p, z, 0.0, &mut fa);
    let fb = DVector::from_vec(fb);
    let mu: DVector<f64> = mu_all.row(k).transpose();
    // ∂T/∂p
    let dt = -&mu / gz_b[k];
    let dq = &l + &fb * dt.transpose();

    let ins = entry_delay_slots(chain, m, leg);
    let outs = exit_delay_slots(chain, m, leg);
    let s = n + m - 1;
    let mut dqhat = DMatrix::zeros(s, s);
    dqhat.view_mut((0, 0), (n, n)).copy_from(&dq);
    for (r, &j) in outs.iter().enumerate() {
        for c in 0..n {
            dqhat[(n + r, c)] = mu_all[(j, c)] + gz_b[j] * dt[c];
        }
    }
    for (ci, &j) in ins.iter().enumerate() {
        let col = n + ci;
        if j == k {
            for row in 0..n {
                dqhat[(row, col)] = -fb[row] / gz_b[k];
            }
            for (r, &l_) in outs.iter().enumerate() {
                dqhat[(n + r, col)] = -gz_b[l_] / gz_b[k];
            }
        } else {
            let r = outs.iter().position(|&o| o == j).expect("j differs from J_out");
            dqhat[(n + r, col)] = 1.0;
        }
    }
    Ok(LegJacobian {
        l,
        mu,
        mu_all,
        dq,
        dqhat,
        gz_entry: gz_a,
        gz_exit: gz_b[k],
        f_entry: DVector::from_vec(fa),
        f_exit: fb,
    })
}

/// Fast connection from the exit of leg `leg - 1` to the landing on `leg`,
/// written in the regularised coordinates `(p, q)` with `q = z^(J)`.
pub struct Jump<'a> {
    sys: &'a dyn SlowFastSystem,
    pub leg: usize,
    pub component: usize,
    /// Fast state on the departure manifold (component `J` replaced by `q`).
    base_z: Vec<f64>,
    pub q_from: f64,
    pub q_to: f64,
    omega: f64,
    singular: Vec<f64>,
    band: f64,
}

// 5-point Gauss–Legendre nodes and weights on [0, 1].
pub(crate) const GL_NODES: [f64; 5] = [
    0.046910077030668,
    0.230765344947158,
    0.5,
    0.769234655052842,
    0.953089922969332,
];
pub(crate) const GL_WEIGHTS: [f64; 5] = [
    0.118463442528095,
    0.239314335249683,
    0.284444444444444,
    0.239314335249683,
    0.118463442528095,
];

impl<'a> Jump<'a> {
    pub fn new(
        sys: &'a dyn SlowFastSystem,
        chain: &ManifoldChain,
        leg: usize,
    ) -> Result<Jump<'a>, EntryExitError> {
        let from = chain.prev(leg);
        let to = chain.leg(leg);
        let j = to.j_in;
        let bounds = sys.z_bounds()[j];
        let bad = || EntryExitError::Precondition {
            leg,
            reason: format!("jump component {} is not on a finite face", j + 1),
        };
        let (q_from, q_to) = (from.z[j], to.z[j]);
        let w_to = face_sign(q_to, bounds).ok_or_else(bad)?;
        let w_from = face_sign(q_from, bounds).ok_or_else(bad)?;
        let (omega, singular, band) = if q_from == q_to {
            (w_to, vec![q_to], 1e-2)
        } else {
            let width = (q_to - q_from).abs();
            (w_to * w_from, vec![q_to, q_from], 1e-2 * width.min(1.0))
        };
        Ok(Jump {
            sys,
            leg,
            component: j,
            base_z: from.z.clone(),
            q_from,
            q_to,
            omega,
            singular,
            band,
        })
    }

    fn z_at(&self, q: f64) -> Vec<f64> {
        let mut z = self.base_z.clone();
        z[self.component] = q;
        z
    }

    /// `(h, g^(J))` of the fast field along the fiber.
    fn raw(&self, p: &[f64], q: f64, h: &mut [f64]) -> f64 {
        let z = self.z_at(q);
        let mut g = vec![0.0; self.sys.m()];
        self.sys.g(p, &z, 0.0, &mut g);
        self.sys.h(p, &z, 0.0, h);
        g[self.component]
    }

    /// Regularised field `(h_i, g_i)` at `(p, q)`; writes `h_i` into `h`
    /// and returns `g_i`.
    pub fn regularized(&self, p: &[f64], q: f64, h: &mut [f64]) -> f64 {
        let n = self.sys.n();
        let near = self
            .singular
            .iter()
            .position(|&c| (q - c).abs() < self.band);
        match near {
            None => {
                let den: f64 = self.singular.iter().map(|&c| q - c).product();
                let g = self.raw(p, q, h);
                let s = self.omega / den;
                for v in h.iter_mut() {
                    *v *= s;
                }
                g * s
            }
            Some(idx) => {
                // g(q)/(q - c) = ∫_0^1 gz(c + s(q - c)) ds, likewise for h,
                // both vanish on the face
                let c = self.singular[idx];
                let rest: f64 = self
                    .singular
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != idx)
                    .map(|(_, &c2)| q - c2)
                    .product();
                let s = self.omega / rest;
                let mut gsum = 0.0;
                let mut dh = vec![0.0; n];
                h.fill(0.0);
                for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    let z = self.z_at(c + x * (q - c));
                    gsum += w * self.sys.gz(self.component, p, &z, 0.0);
                    self.sys.dh_dz(self.component, p, &z, 0.0, &mut dh);
                    for i in 0..n {
                        h[i] += w * dh[i];
                    }
                }
                for v in h.iter_mut() {
                    *v *= s;
                }
                gsum * s
            }
        }
    }

    /// Whether `h` vanishes along the jump fiber through `p`.
    pub fn fiber_is_vertical(&self, p: &[f64]) -> bool {
        let n = self.sys.n();
        let mut h = vec![0.0; n];
        let (lo, hi) = if self.q_from != self.q_to {
            (self.q_from.min(self.q_to), self.q_from.max(self.q_to))
        } else {
            let (blo, bhi) = self.sys.z_bounds()[self.component];
            let c = self.q_to;
            if c == blo {
                (c, if bhi.is_finite() { bhi } else { c + 1.0 })
            } else {
                (if blo.is_finite() { blo } else { c - 1.0 }, c)
            }
        };
        (1..10).all(|k| {
            let q = lo + (hi - lo) * k as f64 / 10.0;
            self.raw(p, q, &mut h);
            h.iter().all(|v| v.abs() <= 1e-14)
        })
    }

    fn event(&self) -> EventSpec<'static> {
        let n = self.sys.n();
        let (c, sign, dir) = if self.q_from != self.q_to {
            (self.q_to, (self.q_to - self.q_from).signum(), Direction::Rising)
        } else {
            // same-face return: leave along ω then come back
            (self.q_to, self.omega, Direction::Falling)
        };
        let mut ev = EventSpec::new(move |_, y: &[f64]| sign * (y[n] - c), dir);
        ev.g_tol = 1e-14;
        ev.t_tol = 1e-12;
        ev
    }

    fn regularized_jacobian(&self, p: &[f64], q: f64) -> DMatrix<f64> {
        let n = self.sys.n();
        let mut jac = DMatrix::zeros(n + 1, n + 1);
        let mut pp = p.to_vec();
        let (mut hu, mut hd) = (vec![0.0; n], vec![0.0; n]);
        for c in 0..=n {
            let x = if c < n { p[c] } else { q };
            let step = 1e-6 * x.abs().max(1.0);
            let (gu, gd) = if c < n {
                pp[c] = x + step;
                let gu = self.regularized(&pp, q, &mut hu);
                pp[c] = x - step;
                let gd = self.regularized(&pp, q, &mut hd);
                pp[c] = x;
                (gu, gd)
            } else {
                (
                    self.regularized(p, q + step, &mut hu),
                    self.regularized(p, q - step, &mut hd),
                )
            };
            for r in 0..n {
                jac[(r, c)] = (hu[r] - hd[r]) / (2.0 * step);
            }
            jac[(n, c)] = (gu - gd) / (2.0 * step);
        }
        jac
    }
}

#[derive(Debug, Clone)]
pub struct JumpResult {
    pub landing_p: Vec<f64>,
    /// Regularised time spent on the fast orbit; 0 for vertical fibers.
    pub t_jump: f64,
    /// `(p, q)` along the regularised fast orbit, absent for vertical fibers.
    pub trajectory: Option<Trajectory>,
    pub vertical: bool,
}

/// Land the fast orbit leaving `exit_p` on the manifold of leg `leg`.
pub fn jump_map(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    exit_p: &[f64],
    opts: &SolverOptions,
) -> Result<JumpResult, EntryExitError> {
    let jump = Jump::new(sys, chain, leg)?;
    let from = chain.prev(leg);
    let gz = sys.gz(jump.component, exit_p, &from.z, 0.0);
    if !(gz > 0.0) {
        return Err(EntryExitError::NotRepelling { leg, gz });
    }
    if jump.fiber_is_vertical(exit_p) {
        return Ok(JumpResult {
            landing_p: exit_p.to_vec(),
            t_jump: 0.0,
            trajectory: None,
            vertical: true,
        });
    }
    let n = sys.n();
    let f = field(n + 1, |_, y: &[f64], dy: &mut [f64]| {
        dy[n] = jump.regularized(&y[..n], y[n], &mut dy[..n]);
    });
    let mut y0 = exit_p.to_vec();
    y0.push(jump.q_from);
    let ode = Options {
        state_bound: opts.jump_box,
        ..opts.ode()
    };
    let hit = integrate_until_with(&f, &y0, 0.0, &jump.event(), opts.t_max, &ode)
        .map_err(|source| EntryExitError::NoHeteroclinic { leg, source })?;
    Ok(JumpResult {
        landing_p: hit.y[..n].to_vec(),
        t_jump: hit.t,
        trajectory: Some(hit.trajectory),
        vertical: false,
    })
}

#[derive(Debug, Clone)]
pub struct JumpJacobian {
    pub r: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub dpi: DMatrix<f64>,
    /// Closed form `g_i(B)/g_i(A)·exp∫(∂_p h_i + ∂_q g_i)` when n = 1.
    pub abel: Option<f64>,
    /// `∫ tr D(h_i, g_i) dt` along the regularised orbit.
    pub trace_integral: f64,
    pub g_exit: f64,
    pub g_landing: f64,
}

pub fn jump_jacobian(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    exit_p: &[f64],
    opts: &SolverOptions,
) -> Result<JumpJacobian, EntryExitError> {
    let n = sys.n();
    let jump = Jump::new(sys, chain, leg)?;
    let from = chain.prev(leg);
    let gz = sys.gz(jump.component, exit_p, &from.z, 0.0);
    if !(gz > 0.0) {
        return Err(EntryExitError::NotRepelling { leg, gz });
    }
    if jump.fiber_is_vertical(exit_p) {
        return Ok(JumpJacobian {
            r: DMatrix::identity(n, n),
            nu: DVector::zeros(n),
            dpi: DMatrix::identity(n, n),
            abel: (n == 1).then_some(1.0),
            trace_integral: 0.0,
            g_exit: 0.0,
            g_landing: 0.0,
        });
    }
    // state: p, q, W ((n+1)×n), ∫ trace
    let s = n + 1;
    let dim = s + s * n + 1;
    let f = field(dim, |_, y: &[f64], dy: &mut [f64]| {
        let (p, q) = (&y[..n], y[n]);
        dy[n] = jump.regularized(p, q, &mut dy[..n]);
        let a = jump.regularized_jacobian(p, q);
        let w = DMatrix::from_column_slice(s, n, &y[s..s + s * n]);
        let dw = &a * w;
        dy[s..s + s * n].copy_from_slice(dw.as_slice());
        dy[dim - 1] = a.trace();
    });
    let mut y0 = vec![0.0; dim];
    y0[..n].copy_from_slice(exit_p);
    y0[n] = jump.q_from;
    for c in 0..n {
        y0[s + c * s + c] = 1.0;
    }
    let ode = Options {
        state_bound: opts.jump_box,
        ..opts.ode()
    };
    let hit = integrate_until_with(&f, &y0, 0.0, &jump.event(), opts.t_max, &ode)
        .map_err(|source| EntryExitError::NoHeteroclinic { leg, source })?;
    let w = DMatrix::from_column_slice(s, n, &hit.y[s..s + s * n]);
    let r = w.rows(0, n).into_owned();
    let nu: DVector<f64> = w.row(n).transpose();
    let landing = &hit.y[..n];
    let mut h_a = vec![0.0; n];
    let g_a = jump.regularized(landing, jump.q_to, &mut h_a);
    if g_a.abs() < GZ_GUARD {
        return Err(EntryExitError::DegenerateGz {
            leg,
            at: "landing",
            value: g_a,
        });
    }
    let mut h_b = vec![0.0; n];
    let g_b = jump.regularized(exit_p, jump.q_from, &mut h_b);
    let h_a = DVector::from_vec(h_a);
    let dpi = &r - &h_a * nu.transpose() / g_a;
    let trace_integral = hit.y[dim - 1];
    Ok(JumpJacobian {
        r,
        nu,
        dpi,
        abel: (n == 1).then(|| g_b / g_a * trace_integral.exp()),
        trace_integral,
        g_exit: g_b,
        g_landing: g_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::LegSpec;

    // f ≡ 1, g = z(1 - z)p on z ∈ [0, 1]; the leg at z = 0 has gz = p.
    struct Antisym;
    impl SlowFastSystem for Antisym {
        fn n(&self) -> usize {
            1
        }
        fn m(&self) -> usize {
            1
        }
        fn z_bounds(&self) -> &[(f64, f64)] {
            &[(0.0, 1.0)]
        }
        fn f(&self, _p: &[f64], _z: &[f64], _eps: f64, out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn g(&self, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
            out[0] = z[0] * (1.0 - z[0]) * p[0];
        }
    }

    fn single_leg_chain() -> ManifoldChain {
        ManifoldChain::new(vec![LegSpec {
            z: vec![0.0],
            j_in: 0,
            a_guess: vec![-1.0],
        }])
    }

    #[test]
    fn antisymmetric_integrand_exits_symmetrically() {
        let chain = single_leg_chain();
        let t = transit_leg(&Antisym, &chain, 0, &[-1.0], &[0.0], &SolverOptions::default())
            .unwrap();
        assert!((t.tau - 2.0).abs() < 1e-9);
        assert!((t.exit_p[0] - 1.0).abs() < 1e-9);
        assert!(t.a5_violation.is_none());
        assert!(t.exit_residual.abs() < 1e-12);
    }

    #[test]
    fn attracting_entry_required() {
        let chain = single_leg_chain();
        let r = transit_leg(&Antisym, &chain, 0, &[1.0], &[0.0], &SolverOptions::default());
        assert!(matches!(r, Err(EntryExitError::Precondition { .. })));
    }

    #[test]
    fn vertical_jump_is_identity() {
        let chain = ManifoldChain::new(vec![
            LegSpec {
                z: vec![0.0],
                j_in: 0,
                a_guess: vec![-1.0],
            },
            LegSpec {
                z: vec![1.0],
                j_in: 0,
                a_guess: vec![1.0],
            },
        ]);
        let opts = SolverOptions::default();
        let j = jump_map(&Antisym, &chain, 1, &[0.7], &opts).unwrap();
        assert!(j.vertical);
        assert_eq!(j.landing_p, vec![0.7]);
        let jj = jump_jacobian(&Antisym, &chain, 1, &[0.7], &opts).unwrap();
        assert_eq!(jj.dpi, DMatrix::identity(1, 1));
        assert!(matches!(
            jump_map(&Antisym, &chain, 1, &[-0.7], &opts),
            Err(EntryExitError::NotRepelling { .. })
        ));
    }

    #[test]
    fn single_leg_jacobian_matches_closed_form() {
        // Q(a) = -a, so DQ = -1; μ(f(A)) = gz(B) - gz(A) = 2.
        let chain = single_leg_chain();
        let opts = SolverOptions::default();
        let t = transit_leg(&Antisym, &chain, 0, &[-1.0], &[0.0], &opts).unwrap();
        let jac = leg_jacobian(&Antisym, &chain, &t, &opts).unwrap();
        assert!((jac.dq[(0, 0)] + 1.0).abs() < 1e-8);
        assert!((jac.mu[0] - 2.0).abs() < 1e-8);
        assert_eq!(jac.dqhat.shape(), (1, 1));
        assert!((jac.dqhat[(0, 0)] - jac.dq[(0, 0)]).abs() < 1e-15);
    }
}
