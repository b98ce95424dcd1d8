//! Catalog results against an independent fixed-step RK4 shooting oracle
//! and against values frozen from separate prototype computations.

mod common;

use nalgebra::DMatrix;
use slowfast::entry_exit::{jump_jacobian, jump_map, transit_leg, EntryExitError, SolverOptions};
use slowfast::ode::{field, integrate_until_with, Direction, EventSpec, Options, Tolerances};
use slowfast::orbit::{unpack_section, StabilityReport};
use slowfast::system::{ManifoldChain, SlowFastSystem};

use common::*;

const H: f64 = 2e-3;

fn rk4_step(sys: &dyn SlowFastSystem, z: &[f64], y: &[f64], h: f64) -> Vec<f64> {
    let (n, m) = (sys.n(), sys.m());
    let rhs = |y: &[f64]| {
        let mut dy = vec![0.0; n + m];
        sys.f(&y[..n], z, 0.0, &mut dy[..n]);
        for j in 0..m {
            dy[n + j] = sys.gz(j, &y[..n], z, 0.0);
        }
        dy
    };
    let add = |a: &[f64], b: &[f64], s: f64| a.iter().zip(b).map(|(x, y)| x + s * y).collect::<Vec<_>>();
    let k1 = rhs(y);
    let k2 = rhs(&add(y, &k1, h / 2.0));
    let k3 = rhs(&add(y, &k2, h / 2.0));
    let k4 = rhs(&add(y, &k3, h));
    (0..n + m)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Exit `(p, d, τ)` of one leg: first rising zero of `d[k]`.
fn oracle_transit(sys: &dyn SlowFastSystem, z: &[f64], k: usize, p: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = sys.n();
    let mut y: Vec<f64> = p.iter().chain(d).copied().collect();
    let mut t = 0.0;
    loop {
        let next = rk4_step(sys, z, &y, H);
        if t > 0.0 && y[n + k] < 0.0 && next[n + k] >= 0.0 {
            let (mut lo, mut hi) = (0.0, H);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if rk4_step(sys, z, &y, mid)[n + k] < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let end = rk4_step(sys, z, &y, hi);
            let mut dd = end[n..].to_vec();
            dd[k] = 0.0;
            return (end[..n].to_vec(), dd, t + hi);
        }
        y = next;
        t += H;
        assert!(t < 1e3, "oracle transit did not exit");
    }
}

/// Return map on the section at the first leg for systems with vertical
/// fast fibers.
fn oracle_return(sys: &dyn SlowFastSystem, chain: &ManifoldChain, x: &[f64]) -> Vec<f64> {
    let (mut p, mut d) = unpack_section(sys, chain, 0, x);
    for i in 0..chain.len() {
        d[chain.leg(i).j_in] = 0.0;
        let (pe, de, _) = oracle_transit(sys, &chain.leg(i).z, chain.j_out(i), &p, &d);
        p = pe;
        d = de;
    }
    let j0 = chain.leg(0).j_in;
    let mut out = p;
    out.extend((0..sys.m()).filter(|&j| j != j0).map(|j| d[j]));
    out
}

fn oracle_jacobian(sys: &dyn SlowFastSystem, chain: &ManifoldChain, x: &[f64]) -> DMatrix<f64> {
    let s = x.len();
    DMatrix::from_fn(s, s, |i, k| {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut lo = x.to_vec();
        let mut hi = x.to_vec();
        lo[k] -= h;
        hi[k] += h;
        (oracle_return(sys, chain, &hi)[i] - oracle_return(sys, chain, &lo)[i]) / (2.0 * h)
    })
}

fn oracle_check(name: &str) {
    let (e, sol) = solve(name);
    let sys = e.system.as_ref();
    let x = &sol.orbit.section;
    let img = oracle_return(sys, &e.chain, x);
    let res = img.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(res < 1e-8, "{name}: oracle fixed-point residual {res:e}");
    assert!(sol.orbit.residual <= 1e-8);

    let dp = oracle_jacobian(sys, &e.chain, x);
    let want = StabilityReport::from_matrix(dp.clone(), 1e-3);
    assert_eq!(want.classification, sol.report.classification, "{name}");
    for (a, b) in sol.report.eigenvalues.iter().zip(&want.eigenvalues) {
        assert!((a - b).norm() < 1e-5, "{name}: eigenvalue {a} vs oracle {b}");
    }
    let r = entrywise_ratio(&sol.report.dp, &dp, 1e-4, 1e-7 * dp.amax().max(1.0));
    assert!(r <= 1.0, "{name}: DP vs oracle, worst ratio {r}");
}

#[test]
fn tradeoff_matches_rk4_shooting() {
    oracle_check("tradeoff");
}

#[test]
fn switching_matches_rk4_shooting() {
    oracle_check("switching");
}

#[test]
fn coevolution_matches_rk4_shooting() {
    oracle_check("coevolution");
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() <= tol, "{what}: {got:?} vs {want:?}");
    }
}

fn assert_mat(got: &DMatrix<f64>, want: &[&[f64]], tol: f64, what: &str) {
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            let g = got[(i, j)];
            assert!((g - w).abs() <= tol * w.abs().max(1e-3), "{what}[{i},{j}]: {g} vs {w}");
        }
    }
}

#[test]
fn tradeoff_frozen_prototype_values() {
    let (_, sol) = solve("tradeoff");
    let legs = &sol.orbit.legs;
    assert_close(&legs[0].entry_p, &[5.57056163, 11.03206045], 1e-7, "A1");
    assert_close(&legs[0].exit_p, &[9.95913932, 0.36222286], 1e-7, "B1");
    assert!((legs[0].tau - 1.80019).abs() < 1e-5);
    assert!((legs[1].tau - 4.67971).abs() < 1e-5);
    assert_mat(&sol.leg_jacobians[0].dq, &[&[-0.00697194, 0.01122189], &[0.06141792, -0.09885386]], 1e-5, "DQ1");
    assert_mat(&sol.leg_jacobians[1].dq, &[&[0.00460232, 5.51343932], &[-0.00412616, -4.94301917]], 1e-5, "DQ2");
    let mut ev: Vec<f64> = sol.report.eigenvalues.iter().map(|z| z.re).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    assert!(ev[0].abs() < 1e-10);
    assert!((ev[1] - 0.82718).abs() < 1e-5);
}

#[test]
fn switching_frozen_prototype_values() {
    let (_, sol) = solve("switching");
    assert_close(&sol.orbit.legs[0].entry_p, &[0.92212, 1.08197, 1.49467], 1e-5, "A1");
    let mut ev = sol.report.eigenvalues.clone();
    ev.sort_by(|a, b| a.im.total_cmp(&b.im));
    assert!((ev[1].re - 1.0).abs() < 1e-6 && ev[1].im.abs() < 1e-9);
    assert!((ev[2].re - 0.91529).abs() < 1e-5 && (ev[2].im - 0.40281).abs() < 1e-5);
    assert!((ev[0].im + 0.40281).abs() < 1e-5);
}

#[test]
fn coevolution_frozen_prototype_values() {
    let (_, sol) = solve("coevolution");
    assert_close(&sol.orbit.section, &[0.32871651, 1.98544148, -0.97682672], 1e-7, "section");
    let entries = [[0.3287, 1.9854], [0.92283, 0.55915], [0.59270, 0.54803], [0.29205, 0.92687]];
    let delays = [[0.0, -0.9768], [-3.8367, 0.0], [0.0, -1.1261], [-0.5518, 0.0]];
    let taus = [6.6273, 7.1314, 1.5752, 0.8968];
    for i in 0..4 {
        let leg = &sol.orbit.legs[i];
        assert_close(&leg.entry_p, &entries[i], 1e-4, "entry");
        assert_close(&leg.entry_d, &delays[i], 1e-4, "entry delay");
        assert!((leg.tau - taus[i]).abs() < 1e-4, "tau {i}: {}", leg.tau);
    }
    let dqhat: [&[&[f64]]; 4] = [
        &[&[-0.013382, 0.004315, -0.006512], &[0.079011, -0.025422, 0.038392], &[-3.29103, -2.42623, 0.67193]],
        &[&[-3.997e-4, -5.804e-4, 2.443e-4], &[-3.877e-5, 2.384e-4, 2.988e-4], &[-0.37098, 1.44093, 0.25792]],
        &[&[-0.031317, 0.012143, -0.090298], &[-0.142638, 0.075762, 0.231750], &[1.005497, 0.516411, 0.794853]],
        &[&[0.288908, -0.043600, 0.219716], &[0.262707, -0.668350, -0.493994], &[2.493675, 0.130255, 0.863402]],
    ];
    for (i, want) in dqhat.iter().enumerate() {
        assert_mat(&sol.leg_jacobians[i].dqhat, want, 2e-3, "DQhat");
    }
    let mut ev: Vec<f64> = sol.report.eigenvalues.iter().map(|z| z.re).collect();
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    assert!((ev[0] - 0.392198).abs() < 1e-6);
    assert!((ev[1] + 6.1e-5).abs() < 1e-6);
    assert!(ev[2].abs() < 1e-9);
}

#[test]
fn tradeoff_first_leg_from_rounded_landing() {
    let (e, _) = solve("tradeoff");
    let t = transit_leg(e.system.as_ref(), &e.chain, 0, &[5.57, 11.03], &[0.0], &SolverOptions::default()).unwrap();
    assert!((t.exit_p[0] - 9.96).abs() < 0.02 && (t.exit_p[1] - 0.36).abs() < 0.02, "{:?}", t.exit_p);
    assert!(t.exit_residual.abs() < 1e-9);
    assert!(t.a5_violation.is_none());
}

#[test]
fn coevolution_first_leg_from_rounded_landing() {
    let (e, _) = solve("coevolution");
    let t = transit_leg(e.system.as_ref(), &e.chain, 0, &[0.33, 1.99], &[0.0, -0.98], &SolverOptions::default()).unwrap();
    assert!((t.exit_p[0] - 0.92).abs() < 0.02 && (t.exit_p[1] - 0.56).abs() < 0.02, "{:?}", t.exit_p);
    assert!(t.exit_residual.abs() < 1e-9);
    assert_eq!(t.exit_d[1], 0.0);
}

#[test]
fn non_exiting_delay_columns_are_unit_vectors() {
    let (e, sol) = solve("coevolution");
    let (n, m) = (e.system.n(), e.system.m());
    for (i, lj) in sol.leg_jacobians.iter().enumerate() {
        let ins = slowfast::entry_exit::entry_delay_slots(&e.chain, m, i);
        let outs = slowfast::entry_exit::exit_delay_slots(&e.chain, m, i);
        for (c, j) in ins.iter().enumerate() {
            if *j == e.chain.j_out(i) {
                continue;
            }
            let r = outs.iter().position(|o| o == j).unwrap();
            for row in 0..n + m - 1 {
                let want = if row == n + r { 1.0 } else { 0.0 };
                assert_eq!(lj.dqhat[(row, n + c)], want);
            }
        }
    }
}

#[test]
fn vertical_fibers_fix_the_slow_state() {
    let opts = SolverOptions::default();
    for name in ["tradeoff", "switching", "coevolution"] {
        let (e, sol) = solve(name);
        let sys = e.system.as_ref();
        for (i, leg) in sol.orbit.legs.iter().enumerate() {
            let to = (i + 1) % e.chain.len();
            let j = jump_map(sys, &e.chain, to, &leg.exit_p, &opts).unwrap();
            assert!(j.vertical);
            assert_eq!(j.landing_p, leg.exit_p);
            let jj = jump_jacobian(sys, &e.chain, to, &leg.exit_p, &opts).unwrap();
            assert_eq!(jj.dpi, DMatrix::identity(sys.n(), sys.n()));
        }
    }
}

#[test]
fn attracting_exit_cannot_jump() {
    let (e, sol) = solve("tradeoff");
    let a1 = &sol.orbit.legs[0].entry_p;
    let err = jump_map(e.system.as_ref(), &e.chain, 1, a1, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, EntryExitError::NotRepelling { .. }), "{err}");
}

#[test]
fn planar_landing_matches_unregularized_fast_orbit() {
    let (e, sol) = solve("planar");
    let sys = e.system.as_ref();
    let a1 = sol.orbit.legs[0].exit_p[0];
    let j = jump_map(sys, &e.chain, 0, &[a1], &SolverOptions::default()).unwrap();
    assert!(!j.vertical);

    let delta = 1e-6;
    let fast = field(2, |_, y: &[f64], dy: &mut [f64]| {
        let (mut h, mut g) = ([0.0], [0.0]);
        sys.h(&y[..1], &y[1..], 0.0, &mut h);
        sys.g(&y[..1], &y[1..], 0.0, &mut g);
        dy[0] = h[0];
        dy[1] = g[0];
    });
    let ev = EventSpec::new(move |_, y: &[f64]| y[1] - delta, Direction::Falling).with_dead_band(1.0);
    let opts = Options::from(Tolerances::new(1e-12, 1e-16));
    let hit = integrate_until_with(&fast, &[a1, delta], 0.0, &ev, 1e4, &opts).unwrap();
    assert!((hit.y[0] - j.landing_p[0]).abs() < 1e-4, "{} vs {}", hit.y[0], j.landing_p[0]);
}
