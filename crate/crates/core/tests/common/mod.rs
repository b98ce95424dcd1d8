#![allow(dead_code)]

use nalgebra::DMatrix;
use slowfast::entry_exit::{
    entry_delay_slots, exit_delay_slots, jump_map, transit_leg, LegTransit, SolverOptions,
};
use slowfast::models::{entry, ModelCatalogEntry};
use slowfast::orbit::{find_singular_orbit, OrbitOptions, OrbitSolution};
use slowfast::system::{ManifoldChain, SlowFastSystem};

pub fn solve(name: &str) -> (ModelCatalogEntry, OrbitSolution) {
    let e = entry(name).expect("catalog model");
    let sol = find_singular_orbit(e.system.as_ref(), &e.chain, &OrbitOptions::default())
        .unwrap_or_else(|err| panic!("{name}: {err}"));
    (e, sol)
}

/// Collects pass/fail lines for one criterion and fails the test at the
/// end if any line failed.
pub struct Gate {
    id: &'static str,
    lines: Vec<(bool, String)>,
}

impl Gate {
    pub fn new(id: &'static str) -> Gate {
        Gate {
            id,
            lines: Vec::new(),
        }
    }

    pub fn check(&mut self, ok: bool, what: impl Into<String>) -> bool {
        self.lines.push((ok, what.into()));
        ok
    }

    pub fn finish(self) {
        let mut failed = 0;
        for (ok, line) in &self.lines {
            println!("{} {} {}", self.id, if *ok { "PASS" } else { "FAIL" }, line);
            failed += usize::from(!ok);
        }
        assert!(failed == 0, "{}: {failed} of {} checks failed", self.id, self.lines.len());
    }
}

pub fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.5}")).collect();
    format!("({})", parts.join(", "))
}

pub fn fmt_mat(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let r: Vec<String> = (0..m.ncols()).map(|j| format!("{:.6}", m[(i, j)])).collect();
            format!("[{}]", r.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

/// Largest entrywise violation of `|a - b| <= max(rel·|b|, abs)`, reported
/// as a ratio (≤ 1 passes).
pub fn entrywise_ratio(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64, abs: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (rel * y.abs()).max(abs))
        .fold(0.0, f64::max)
}

pub fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn transit_exit(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    leg: usize,
    p: &[f64],
    d: &[f64],
    opts: &SolverOptions,
) -> LegTransit {
    transit_leg(sys, chain, leg, p, d, opts).expect("perturbed transit")
}

/// Central differences of the exit point with respect to the entry point at
/// fixed entry delays.
pub fn fd_dq(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    t: &LegTransit,
    opts: &SolverOptions,
) -> DMatrix<f64> {
    let n = sys.n();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = step(t.entry_p[k]);
        let mut lo = t.entry_p.clone();
        let mut hi = t.entry_p.clone();
        lo[k] -= h;
        hi[k] += h;
        let a = transit_exit(sys, chain, t.leg, &lo, &t.entry_d, opts);
        let b = transit_exit(sys, chain, t.leg, &hi, &t.entry_d, opts);
        for i in 0..n {
            out[(i, k)] = (b.exit_p[i] - a.exit_p[i]) / (2.0 * h);
        }
    }
    out
}

/// Central differences of the transit in section coordinates.
pub fn fd_dqhat(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    t: &LegTransit,
    opts: &SolverOptions,
) -> DMatrix<f64> {
    let (n, m) = (sys.n(), sys.m());
    let ins = entry_delay_slots(chain, m, t.leg);
    let outs = exit_delay_slots(chain, m, t.leg);
    let s = n + m - 1;
    let pack_out = |tr: &LegTransit| {
        let mut v = tr.exit_p.clone();
        v.extend(outs.iter().map(|&j| tr.exit_d[j]));
        v
    };
    let mut out = DMatrix::zeros(s, s);
    for k in 0..s {
        let (mut p_lo, mut p_hi) = (t.entry_p.clone(), t.entry_p.clone());
        let (mut d_lo, mut d_hi) = (t.entry_d.clone(), t.entry_d.clone());
        let h;
        if k < n {
            h = step(t.entry_p[k]);
            p_lo[k] -= h;
            p_hi[k] += h;
        } else {
            let j = ins[k - n];
            h = step(t.entry_d[j]);
            d_lo[j] -= h;
            d_hi[j] += h;
        }
        let a = pack_out(&transit_exit(sys, chain, t.leg, &p_lo, &d_lo, opts));
        let b = pack_out(&transit_exit(sys, chain, t.leg, &p_hi, &d_hi, opts));
        for i in 0..s {
            out[(i, k)] = (b[i] - a[i]) / (2.0 * h);
        }
    }
    out
}

/// Central differences (step 1e-5) of the jump landing into `to_leg`.
pub fn fd_dpi(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    to_leg: usize,
    exit_p: &[f64],
    opts: &SolverOptions,
) -> DMatrix<f64> {
    let n = sys.n();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5;
        let mut lo = exit_p.to_vec();
        let mut hi = exit_p.to_vec();
        lo[k] -= h;
        hi[k] += h;
        let a = jump_map(sys, chain, to_leg, &lo, opts).expect("perturbed jump");
        let b = jump_map(sys, chain, to_leg, &hi, opts).expect("perturbed jump");
        for i in 0..n {
            out[(i, k)] = (b.landing_p[i] - a.landing_p[i]) / (2.0 * h);
        }
    }
    out
}
