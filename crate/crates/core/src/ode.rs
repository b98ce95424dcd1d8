//! Dormand–Prince 5(4) integration with dense output, event location and
//! variational propagation.

use nalgebra::DMatrix;

pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

impl<V: VectorField + ?Sized> VectorField for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (**self).eval(t, y, dy)
    }
}

/// Closure-backed vector field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

pub fn field<F: Fn(f64, &[f64], &mut [f64])>(dim: usize, f: F) -> FnField<F> {
    FnField { dim, f }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-9,
            atol: 1e-11,
        }
    }
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Tolerances { rtol, atol }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub tol: Tolerances,
    pub max_steps: usize,
    pub h_max: f64,
    /// Abort with [`OdeError::Escape`] once any component exceeds this
    /// magnitude.
    pub state_bound: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: Tolerances::default(),
            max_steps: 2_000_000,
            h_max: f64::INFINITY,
            state_bound: f64::INFINITY,
        }
    }
}

impl From<Tolerances> for Options {
    fn from(tol: Tolerances) -> Self {
        Options {
            tol,
            ..Options::default()
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64, y: Vec<f64> },
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64, y: Vec<f64> },
    #[error("state left the admissible box at t = {t}")]
    Escape { t: f64, y: Vec<f64> },
    #[error("step limit reached at t = {t}")]
    TooManySteps { t: f64, y: Vec<f64> },
    #[error("no event before t = {t_max}")]
    NoEvent { t_max: f64, trajectory: Box<Trajectory> },
    #[error("time span must be increasing and finite")]
    InvalidSpan,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Knots plus the per-step quartic interpolant of the integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    // per step: start time, step length, then 5·dim coefficients
    steps: Vec<(f64, f64)>,
    coeffs: Vec<f64>,
}

impl Trajectory {
    fn new(dim: usize, t0: f64, y0: &[f64]) -> Self {
        Trajectory {
            dim,
            times: vec![t0],
            states: y0.to_vec(),
            steps: Vec::new(),
            coeffs: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory has a knot")
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Dense-output state at `t`, clamped to the covered span.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        if self.steps.is_empty() {
            out.copy_from_slice(self.state(0));
            return;
        }
        let t = t.clamp(self.t_start(), self.t_end());
        let k = match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            p => (p - 1).min(self.steps.len() - 1),
        };
        interpolate(
            &self.coeffs[5 * self.dim * k..5 * self.dim * (k + 1)],
            self.steps[k],
            t,
            out,
        );
    }

    fn push_step(&mut self, t0: f64, h: f64, coeffs: &[f64], t1: f64, y1: &[f64]) {
        self.steps.push((t0, h));
        self.coeffs.extend_from_slice(coeffs);
        self.times.push(t1);
        self.states.extend_from_slice(y1);
    }
}

fn interpolate(c: &[f64], (t0, h): (f64, f64), t: f64, out: &mut [f64]) {
    let n = out.len();
    let th = (t - t0) / h;
    let th1 = 1.0 - th;
    for i in 0..n {
        out[i] = c[i]
            + th * (c[n + i] + th1 * (c[2 * n + i] + th * (c[3 * n + i] + th1 * c[4 * n + i])));
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step as seen by an observer.
pub struct StepView<'a> {
    pub t0: f64,
    pub t1: f64,
    pub y0: &'a [f64],
    pub y1: &'a [f64],
    h: f64,
    coeffs: &'a [f64],
}

impl StepView<'_> {
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        interpolate(self.coeffs, (self.t0, self.h), t, out);
    }
}

enum Flow {
    Continue,
    Stop(f64),
}

fn check_finite(t: f64, y: &[f64], dy: &[f64]) -> Result<(), OdeError> {
    if dy.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { t, y: y.to_vec() })
    }
}

// Core driver. The observer sees every accepted step and may stop the
// integration at a time inside it; the trajectory is then truncated there.
fn drive<V: VectorField + ?Sized>(
    f: &V,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    opts: &Options,
    mut observer: impl FnMut(&StepView) -> Flow,
) -> Result<(Trajectory, bool), OdeError> {
    let n = f.dim();
    if y0.len() != n {
        return Err(OdeError::Dimension {
            expected: n,
            got: y0.len(),
        });
    }
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(OdeError::InvalidSpan);
    }
    let Tolerances { rtol, atol } = opts.tol;
    let mut traj = Trajectory::new(n, t0, y0);
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut coeffs = vec![0.0; 5 * n];
    f.eval(t, &y, &mut k1);
    check_finite(t, &y, &k1)?;

    let sc = |a: f64, b: f64| atol + rtol * a.abs().max(b.abs());
    let mut h = initial_step(f, t, &y, &k1, t_end - t0, opts)?;
    let mut err_prev: f64 = 1e-4;
    let mut reject = false;
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err(OdeError::TooManySteps { t, y });
        }
        steps += 1;
        if h < 16.0 * f64::EPSILON * t.abs().max(1e-300) || h < 1e-300 {
            return Err(OdeError::StepUnderflow { t, y });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        f.eval(t + C2 * h, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f.eval(t + C3 * h, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f.eval(t + C4 * h, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f.eval(t + C5 * h, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let tn = if last { t_end } else { t + h };
        f.eval(tn, &ytmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f.eval(tn, &ynew, &mut k7);

        let mut err = 0.0;
        let mut finite = true;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let r = e / sc(y[i], ynew[i]);
            err += r * r;
            finite &= ynew[i].is_finite() && k7[i].is_finite();
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !finite || !err.is_finite() {
            // shrink hard and retry; a genuinely singular field ends in underflow
            h *= 0.1;
            reject = true;
            continue;
        }

        if err <= 1.0 {
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                coeffs[i] = y[i];
                coeffs[n + i] = ydiff;
                coeffs[2 * n + i] = bspl;
                coeffs[3 * n + i] = ydiff - h * k7[i] - bspl;
                coeffs[4 * n + i] = h
                    * (D1 * k1[i]
                        + D3 * k3[i]
                        + D4 * k4[i]
                        + D5 * k5[i]
                        + D6 * k6[i]
                        + D7 * k7[i]);
            }
            let view = StepView {
                t0: t,
                t1: tn,
                y0: &y,
                y1: &ynew,
                h,
                coeffs: &coeffs,
            };
            if let Flow::Stop(ts) = observer(&view) {
                let mut ys = vec![0.0; n];
                interpolate(&coeffs, (t, h), ts, &mut ys);
                traj.push_step(t, h, &coeffs, ts, &ys);
                return Ok((traj, true));
            }
            traj.push_step(t, h, &coeffs, tn, &ynew);
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            t = tn;
            if y.iter().any(|v| v.abs() > opts.state_bound) {
                return Err(OdeError::Escape { t, y });
            }
            if last {
                return Ok((traj, false));
            }
            // PI step-size control
            let mut fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            fac = fac.clamp(0.2, 10.0);
            if reject {
                fac = fac.min(1.0);
            }
            err_prev = err.max(1e-4);
            h = (h * fac).min(opts.h_max);
            reject = false;
        } else {
            let fac = (0.9 * err.powf(-0.2)).max(0.2);
            h *= fac;
            reject = true;
        }
    }
}

fn initial_step<V: VectorField + ?Sized>(
    f: &V,
    t: f64,
    y: &[f64],
    dy: &[f64],
    span: f64,
    opts: &Options,
) -> Result<f64, OdeError> {
    let n = y.len();
    let Tolerances { rtol, atol } = opts.tol;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..n {
        let sc = atol + rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (dy[i] / sc).powi(2);
    }
    let nn = n.max(1) as f64;
    let (d0, d1) = ((d0 / nn).sqrt(), (d1 / nn).sqrt());
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span).min(opts.h_max);
    let y1: Vec<f64> = (0..n).map(|i| y[i] + h0 * dy[i]).collect();
    let mut dy1 = vec![0.0; n];
    f.eval(t + h0, &y1, &mut dy1);
    if !dy1.iter().all(|v| v.is_finite()) {
        return Ok(h0 * 1e-3);
    }
    let mut d2 = 0.0;
    for i in 0..n {
        let sc = atol + rtol * y[i].abs();
        d2 += ((dy1[i] - dy[i]) / sc).powi(2);
    }
    let d2 = (d2 / nn).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span).min(opts.h_max))
}

pub fn integrate<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    t_span: (f64, f64),
    tol: Tolerances,
) -> Result<Trajectory, OdeError> {
    integrate_with(field, y0, t_span, &tol.into())
}

pub fn integrate_with<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    (t0, t1): (f64, f64),
    opts: &Options,
) -> Result<Trajectory, OdeError> {
    drive(field, y0, t0, t1, opts, |_| Flow::Continue).map(|(tr, _)| tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rising,
    Falling,
    Either,
}

impl Direction {
    fn crosses(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Rising => a < 0.0 && b >= 0.0,
            Direction::Falling => a > 0.0 && b <= 0.0,
            Direction::Either => (a < 0.0 && b >= 0.0) || (a > 0.0 && b <= 0.0),
        }
    }
}

/// Scalar event `func(t, y) = 0` crossed in `direction`.
pub struct EventSpec<'a> {
    pub func: Box<dyn Fn(f64, &[f64]) -> f64 + 'a>,
    pub direction: Direction,
    /// Bracket width at which root refinement may stop.
    pub t_tol: f64,
    /// Residual at which root refinement may stop.
    pub g_tol: f64,
    /// Crossings closer than this to the initial time are ignored.
    pub dead_band: f64,
}

impl<'a> EventSpec<'a> {
    pub fn new(func: impl Fn(f64, &[f64]) -> f64 + 'a, direction: Direction) -> Self {
        EventSpec {
            func: Box::new(func),
            direction,
            t_tol: 1e-10,
            g_tol: 1e-12,
            dead_band: 1e-8,
        }
    }

    pub fn with_dead_band(mut self, dead_band: f64) -> Self {
        self.dead_band = dead_band;
        self
    }
}

#[derive(Debug, Clone)]
pub struct EventHit {
    pub t: f64,
    pub y: Vec<f64>,
    pub trajectory: Trajectory,
}

pub fn integrate_until<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    event: &EventSpec,
    t_max: f64,
    tol: Tolerances,
) -> Result<EventHit, OdeError> {
    integrate_until_with(field, y0, 0.0, event, t_max, &tol.into())
}

pub fn integrate_until_with<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    t0: f64,
    event: &EventSpec,
    t_max: f64,
    opts: &Options,
) -> Result<EventHit, OdeError> {
    let n = field.dim();
    let t_watch = t0 + event.dead_band;
    let mut buf = vec![0.0; n];
    let (traj, hit) = drive(field, y0, t0, t_max, opts, |s| {
        if s.t1 <= t_watch {
            return Flow::Continue;
        }
        let (ta, ga) = if s.t0 < t_watch {
            s.interpolate(t_watch, &mut buf);
            (t_watch, (event.func)(t_watch, &buf))
        } else {
            (s.t0, (event.func)(s.t0, s.y0))
        };
        let gb = (event.func)(s.t1, s.y1);
        if !event.direction.crosses(ga, gb) {
            return Flow::Continue;
        }
        Flow::Stop(locate_root(s, event, ta, ga, gb, &mut buf))
    })?;
    if !hit {
        return Err(OdeError::NoEvent {
            t_max,
            trajectory: Box::new(traj),
        });
    }
    Ok(EventHit {
        t: traj.t_end(),
        y: traj.last_state().to_vec(),
        trajectory: traj,
    })
}

// Illinois-modified regula falsi on the dense interpolant, keeping the
// sign-change bracket so the reported crossing honours the direction.
fn locate_root(
    s: &StepView,
    event: &EventSpec,
    mut a: f64,
    mut ga: f64,
    mut gb: f64,
    buf: &mut [f64],
) -> f64 {
    let mut b = s.t1;
    if gb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let width = b - a;
        let mut m = b - gb * width / (gb - ga);
        if !(m > a && m < b) {
            m = 0.5 * (a + b);
        }
        s.interpolate(m, buf);
        let gm = (event.func)(m, buf);
        if gm == 0.0 {
            return m;
        }
        if (gm < 0.0) == (ga < 0.0) {
            a = m;
            ga = gm;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = m;
            gb = gm;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        let tiny = 4.0 * f64::EPSILON * b.abs().max(1.0);
        if (b - a <= event.t_tol && gm.abs() <= event.g_tol) || b - a <= tiny {
            break;
        }
    }
    b
}

/// Integrate `y' = f(t, y)` together with `V' = J(t, y) V`.
pub fn propagate_variational<V, J>(
    field: &V,
    jacobian: J,
    y0: &[f64],
    v0: &DMatrix<f64>,
    t_span: (f64, f64),
    tol: Tolerances,
) -> Result<(Vec<f64>, DMatrix<f64>), OdeError>
where
    V: VectorField + ?Sized,
    J: Fn(f64, &[f64]) -> DMatrix<f64>,
{
    let n = field.dim();
    if v0.nrows() != n {
        return Err(OdeError::Dimension {
            expected: n,
            got: v0.nrows(),
        });
    }
    let k = v0.ncols();
    let aug = self::field(n + n * k, |t, y: &[f64], dy: &mut [f64]| {
        field.eval(t, &y[..n], &mut dy[..n]);
        let j = jacobian(t, &y[..n]);
        let v = DMatrix::from_column_slice(n, k, &y[n..]);
        let dv = j * v;
        dy[n..].copy_from_slice(dv.as_slice());
    });
    let mut z0 = y0.to_vec();
    z0.extend_from_slice(v0.as_slice());
    let tr = integrate(&aug, &z0, t_span, tol)?;
    let end = tr.last_state();
    Ok((
        end[..n].to_vec(),
        DMatrix::from_column_slice(n, k, &end[n..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> impl VectorField {
        field(1, |_, y, dy| dy[0] = -y[0])
    }

    #[test]
    fn exponential_decay() {
        let tr = integrate(&decay(), &[1.0], (0.0, 1.0), Tolerances::new(1e-9, 1e-12)).unwrap();
        assert!((tr.last_state()[0] - (-1f64).exp()).abs() < 1e-8);
        assert_eq!(tr.t_end(), 1.0);
    }

    #[test]
    fn harmonic_oscillator_closes() {
        let f = field(2, |_, y, dy| {
            dy[0] = y[1];
            dy[1] = -y[0];
        });
        let tr = integrate(&f, &[1.0, 0.0], (0.0, 2.0 * std::f64::consts::PI), Tolerances::default())
            .unwrap();
        let e = tr.last_state();
        assert!((e[0] - 1.0).abs() < 1e-6 && e[1].abs() < 1e-6);
    }

    #[test]
    fn dense_output_hits_knots_and_midpoints() {
        let tol = Tolerances::new(1e-9, 1e-12);
        let tr = integrate(&decay(), &[1.0], (0.0, 3.0), tol).unwrap();
        for (k, &t) in tr.times().iter().enumerate() {
            assert!((tr.eval(t)[0] - tr.state(k)[0]).abs() <= 10.0 * tol.rtol);
        }
        for &t in &[0.05, 0.77, 1.5, 2.9] {
            assert!((tr.eval(t)[0] - (-t as f64).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_crossing_event() {
        let f = field(1, |_, _, dy| dy[0] = 1.0);
        let ev = EventSpec::new(|_, y| y[0], Direction::Rising);
        let hit = integrate_until(&f, &[-1.0], &ev, 10.0, Tolerances::default()).unwrap();
        assert!((hit.t - 1.0).abs() < 1e-10);
        assert!(hit.y[0].abs() <= 1e-12);
        assert_eq!(hit.trajectory.t_end(), hit.t);
    }

    #[test]
    fn missing_event_returns_trajectory() {
        let f = field(1, |_, _, dy| dy[0] = 1.0);
        let ev = EventSpec::new(|_, y| y[0] - 10.0, Direction::Rising);
        match integrate_until(&f, &[0.0], &ev, 5.0, Tolerances::default()) {
            Err(OdeError::NoEvent { t_max, trajectory }) => {
                assert_eq!(t_max, 5.0);
                assert!((trajectory.last_state()[0] - 5.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dead_band_skips_start_and_direction_filters() {
        // y = sin(t) starts on the root; the first admissible falling crossing is at π.
        let f = field(2, |_, y, dy| {
            dy[0] = y[1];
            dy[1] = -y[0];
        });
        let ev = EventSpec::new(|_, y| y[0], Direction::Falling);
        let hit = integrate_until(&f, &[0.0, 1.0], &ev, 10.0, Tolerances::new(1e-11, 1e-13)).unwrap();
        assert!((hit.t - std::f64::consts::PI).abs() < 1e-9);
        let ev = EventSpec::new(|_, y| y[0], Direction::Rising);
        let hit = integrate_until(&f, &[0.0, 1.0], &ev, 10.0, Tolerances::new(1e-11, 1e-13)).unwrap();
        assert!((hit.t - 2.0 * std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn non_finite_field_is_reported() {
        let f = field(1, |_, _, dy| dy[0] = f64::NAN);
        assert!(matches!(
            integrate(&f, &[1.0], (0.0, 1.0), Tolerances::default()),
            Err(OdeError::NonFinite { .. })
        ));
    }

    #[test]
    fn blow_up_underflows() {
        // y' = y², y(0) = 1 blows up at t = 1
        let f = field(1, |_, y, dy| dy[0] = y[0] * y[0]);
        let r = integrate(&f, &[1.0], (0.0, 2.0), Tolerances::default());
        assert!(matches!(
            r,
            Err(OdeError::StepUnderflow { .. }) | Err(OdeError::NonFinite { .. })
        ));
    }

    #[test]
    fn rejects_reversed_span() {
        assert!(matches!(
            integrate(&decay(), &[1.0], (1.0, 0.0), Tolerances::default()),
            Err(OdeError::InvalidSpan)
        ));
    }

    // Scaling and squaring with a Taylor core, as an independent oracle.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.iter().map(|v| v.abs()).sum::<f64>();
        let s = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
        let b = a / 2f64.powi(s);
        let n = a.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn variational_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 1.0, 0.2, -1.0, -0.1, 0.0, 0.3, 0.4, -0.7]);
        let a2 = a.clone();
        let f = field(3, move |_, y, dy| {
            let v = &a2 * DMatrix::from_column_slice(3, 1, y);
            dy.copy_from_slice(v.as_slice());
        });
        let a3 = a.clone();
        let (_, v) = propagate_variational(
            &f,
            |_, _| a3.clone(),
            &[1.0, 0.0, 0.0],
            &DMatrix::identity(3, 3),
            (0.0, 2.0),
            Tolerances::new(1e-11, 1e-13),
        )
        .unwrap();
        let want = expm(&(a * 2.0));
        assert!((v - want).amax() < 1e-7);
    }

    #[test]
    fn zero_seed_stays_zero() {
        let f = field(1, |_, y, dy| dy[0] = y[0].sin());
        let (_, v) = propagate_variational(
            &f,
            |_, y| DMatrix::from_element(1, 1, y[0].cos()),
            &[0.3],
            &DMatrix::zeros(1, 2),
            (0.0, 1.0),
            Tolerances::default(),
        )
        .unwrap();
        assert_eq!(v.amax(), 0.0);
    }
}
