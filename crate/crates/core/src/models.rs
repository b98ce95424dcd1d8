//! The four example systems: a trait trade-off model, prey switching,
//! two-trait predator-prey coevolution, and a planar instance.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::config::{ChainConfig, Config, LegConfig};
use crate::expr::{Dual, Scalar};
use crate::system::{LegSpec, ManifoldChain, SlowFastSystem};

/// Right-hand sides written once over any [`Scalar`], so the derivatives
/// come from dual evaluation of the same code.
pub trait ClosedForm: Send + Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn bounds(&self) -> &[(f64, f64)];
    fn f<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]);
    fn g<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]);
    fn h<S: Scalar>(&self, _p: &[S], _z: &[S], out: &mut [S]) {
        out.fill(S::cst(0.0));
    }
    /// Closed-form `∂g^(j)/∂z^(j)`.
    fn gz<S: Scalar>(&self, j: usize, p: &[S], z: &[S]) -> S;
    fn params(&self) -> Vec<(String, f64)>;
}

/// Adapter giving a [`ClosedForm`] model exact first derivatives.
#[derive(Debug, Clone)]
pub struct Closed<T>(pub T);

fn lift(v: &[f64]) -> Vec<Dual> {
    v.iter().map(|&x| Dual::cst(x)).collect()
}

impl<T: ClosedForm> SlowFastSystem for Closed<T> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn m(&self) -> usize {
        self.0.m()
    }
    fn z_bounds(&self) -> &[(f64, f64)] {
        self.0.bounds()
    }
    fn f(&self, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
        self.0.f(p, z, out)
    }
    fn g(&self, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
        self.0.g(p, z, out)
    }
    fn h(&self, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
        self.0.h(p, z, out)
    }
    fn gz(&self, j: usize, p: &[f64], z: &[f64], _eps: f64) -> f64 {
        self.0.gz(j, p, z)
    }
    fn df_dp(&self, p: &[f64], z: &[f64], _eps: f64) -> DMatrix<f64> {
        let n = self.0.n();
        let mut jac = DMatrix::zeros(n, n);
        let zd = lift(z);
        let mut pd = lift(p);
        let mut out = vec![Dual::default(); n];
        for k in 0..n {
            pd[k].deriv = 1.0;
            self.0.f(&pd, &zd, &mut out);
            pd[k].deriv = 0.0;
            for i in 0..n {
                jac[(i, k)] = out[i].deriv;
            }
        }
        jac
    }
    fn dgz_dp(&self, j: usize, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
        let zd = lift(z);
        let mut pd = lift(p);
        for k in 0..self.0.n() {
            pd[k].deriv = 1.0;
            out[k] = self.0.gz(j, &pd, &zd).deriv;
            pd[k].deriv = 0.0;
        }
    }
    fn dh_dz(&self, j: usize, p: &[f64], z: &[f64], _eps: f64, out: &mut [f64]) {
        let pd = lift(p);
        let mut zd = lift(z);
        zd[j].deriv = 1.0;
        let mut h = vec![Dual::default(); self.0.n()];
        self.0.h(&pd, &zd, &mut h);
        for (o, v) in out.iter_mut().zip(h) {
            *o = v.deriv;
        }
    }
    fn params(&self) -> Vec<(String, f64)> {
        self.0.params()
    }
}

fn c<S: Scalar>(v: f64) -> S {
    S::cst(v)
}

/// Predator-prey model with a prey defence trait `α` trading growth
/// against predation.
#[derive(Debug, Clone)]
pub struct Tradeoff {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub k: f64,
    pub r: f64,
}

impl Default for Tradeoff {
    fn default() -> Self {
        Tradeoff {
            a: -0.1,
            b: 3.0,
            c: 1.0,
            d: 2.8,
            k: 1.0,
            r: 10.0,
        }
    }
}

impl Tradeoff {
    /// Selection gradient `E(x, y, α)`.
    pub fn e<S: Scalar>(&self, x: S, y: S, al: S) -> S {
        c::<S>(1.0) - y * (al * (2.0 * self.a) + self.b) / (x + 1.0)
    }
}

const UNIT: [(f64, f64); 1] = [(0.0, 1.0)];
const UNIT2: [(f64, f64); 2] = [(0.0, 1.0), (0.0, 1.0)];
const HALF_LINE: [(f64, f64); 1] = [(0.0, f64::INFINITY)];

impl ClosedForm for Tradeoff {
    fn n(&self) -> usize {
        2
    }
    fn m(&self) -> usize {
        1
    }
    fn bounds(&self) -> &[(f64, f64)] {
        &UNIT
    }
    fn f<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let (x, y, al) = (p[0], p[1], z[0]);
        let pred = x * y * (al * al * self.a + al * self.b + self.c) / (x + 1.0);
        out[0] = x * (al + self.r - x * self.k) - pred;
        out[1] = pred - y * self.d;
    }
    fn g<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let al = z[0];
        out[0] = al * (c::<S>(1.0) - al) * self.e(p[0], p[1], al);
    }
    fn gz<S: Scalar>(&self, _j: usize, p: &[S], z: &[S]) -> S {
        let (x, y, al) = (p[0], p[1], z[0]);
        let de = -(y * (2.0 * self.a)) / (x + 1.0);
        (c::<S>(1.0) - al * 2.0) * self.e(x, y, al) + al * (c::<S>(1.0) - al) * de
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![
            ("a".into(), self.a),
            ("b".into(), self.b),
            ("c".into(), self.c),
            ("d".into(), self.d),
            ("k".into(), self.k),
            ("r".into(), self.r),
        ]
    }
}

/// Predator switching between two prey, rescaled so the predator death
/// rate is one. `m` is kept as metadata only: the rescaling absorbs it.
#[derive(Debug, Clone)]
pub struct Switching {
    pub r: f64,
    pub m: f64,
}

impl Default for Switching {
    fn default() -> Self {
        Switching { r: 0.5, m: 0.4 }
    }
}

impl ClosedForm for Switching {
    fn n(&self) -> usize {
        3
    }
    fn m(&self) -> usize {
        1
    }
    fn bounds(&self) -> &[(f64, f64)] {
        &UNIT
    }
    fn f<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let (p1, p2, zz, q) = (p[0], p[1], p[2], z[0]);
        let one = c::<S>(1.0);
        out[0] = (one - q * zz) * p1;
        out[1] = (c::<S>(self.r) - (one - q) * zz) * p2;
        out[2] = (q * p1 + (one - q) * p2 - 1.0) * zz;
    }
    fn g<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let q = z[0];
        out[0] = q * (c::<S>(1.0) - q) * (p[0] - p[1]);
    }
    fn gz<S: Scalar>(&self, _j: usize, p: &[S], z: &[S]) -> S {
        (c::<S>(1.0) - z[0] * 2.0) * (p[0] - p[1])
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("m".into(), self.m), ("r".into(), self.r)]
    }
}

/// Predator-prey model with a prey trait `α` and a predator trait `β`
/// following fitness-gradient dynamics.
#[derive(Debug, Clone)]
pub struct Coevolution {
    pub s0: f64,
    pub s1: f64,
    pub k0: f64,
    pub k1: f64,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub c0: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub h: f64,
}

impl Default for Coevolution {
    fn default() -> Self {
        Coevolution {
            s0: 2.5,
            s1: 3.5,
            k0: 1.0,
            k1: 0.1,
            r0: 0.65,
            r1: 3.0,
            r2: 2.3,
            r3: -0.2,
            r4: 0.01,
            c0: 1.7,
            delta0: 0.76,
            delta1: 1.77,
            h: 1.0,
        }
    }
}

impl Coevolution {
    fn rate<S: Scalar>(&self, al: S, be: S) -> S {
        al * self.r1 + be * self.r2 + al * be * self.r3 + be * be * self.r4 + self.r0
    }

    /// Prey fitness gradient `∂/∂α ((F - G)/x)`.
    pub fn e1<S: Scalar>(&self, x: S, y: S, al: S, be: S) -> S {
        let kk = al * self.k1 + self.k0;
        let growth = al * self.s1 + self.s0;
        (c::<S>(1.0) - x / kk) * self.s1 + growth * x * self.k1 / (kk * kk)
            - (be * self.r3 + self.r1) * y / (x * self.h + 1.0)
    }

    /// Predator fitness gradient `∂/∂β ((H - D)/y)`.
    pub fn e2<S: Scalar>(&self, x: S, y: S, al: S, be: S) -> S {
        (al * self.r3 + be * (2.0 * self.r4) + self.r2) * x * self.c0 / (x * self.h + 1.0)
            - y.sqrt() * self.delta1
    }

    fn de1_dal<S: Scalar>(&self, x: S, al: S) -> S {
        let kk = al * self.k1 + self.k0;
        let growth = al * self.s1 + self.s0;
        x * (2.0 * self.s1 * self.k1) / (kk * kk)
            - growth * x * (2.0 * self.k1 * self.k1) / (kk * kk * kk)
    }
}

impl ClosedForm for Coevolution {
    fn n(&self) -> usize {
        2
    }
    fn m(&self) -> usize {
        2
    }
    fn bounds(&self) -> &[(f64, f64)] {
        &UNIT2
    }
    fn f<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let (x, y, al, be) = (p[0], p[1], z[0], z[1]);
        let kk = al * self.k1 + self.k0;
        let growth = x * (al * self.s1 + self.s0) * (c::<S>(1.0) - x / kk);
        let pred = self.rate(al, be) * x * y / (x * self.h + 1.0);
        out[0] = growth - pred;
        out[1] = pred * self.c0 - y.powf(1.5) * (be * self.delta1 + self.delta0);
    }
    fn g<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        let (x, y, al, be) = (p[0], p[1], z[0], z[1]);
        let one = c::<S>(1.0);
        out[0] = al * (one - al) * self.e1(x, y, al, be);
        out[1] = be * (one - be) * self.e2(x, y, al, be);
    }
    fn gz<S: Scalar>(&self, j: usize, p: &[S], z: &[S]) -> S {
        let (x, y, al, be) = (p[0], p[1], z[0], z[1]);
        let one = c::<S>(1.0);
        if j == 0 {
            (one - al * 2.0) * self.e1(x, y, al, be) + al * (one - al) * self.de1_dal(x, al)
        } else {
            let de2 = x * (2.0 * self.c0 * self.r4) / (x * self.h + 1.0);
            (one - be * 2.0) * self.e2(x, y, al, be) + be * (one - be) * de2
        }
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![
            ("c0".into(), self.c0),
            ("delta0".into(), self.delta0),
            ("delta1".into(), self.delta1),
            ("h".into(), self.h),
            ("k0".into(), self.k0),
            ("k1".into(), self.k1),
            ("r0".into(), self.r0),
            ("r1".into(), self.r1),
            ("r2".into(), self.r2),
            ("r3".into(), self.r3),
            ("r4".into(), self.r4),
            ("s0".into(), self.s0),
            ("s1".into(), self.s1),
        ]
    }
}

/// Planar system `a' = εF + bH`, `b' = bG` on `b >= 0` with quadratic `F`
/// and affine `G`, `H`.
#[derive(Debug, Clone)]
pub struct Planar {
    pub s: f64,
    pub w: f64,
    pub kb: f64,
    pub h0: f64,
    pub h1: f64,
    pub h2: f64,
}

impl Default for Planar {
    fn default() -> Self {
        Planar {
            s: 0.3,
            w: 0.3,
            kb: -0.15,
            h0: -1.0,
            h1: -0.1,
            h2: 0.05,
        }
    }
}

impl Planar {
    pub fn big_f<S: Scalar>(&self, a: S) -> S {
        a * self.s + a * a * self.w + 1.0
    }
    pub fn big_g<S: Scalar>(&self, a: S, b: S) -> S {
        a + b * self.kb
    }
    pub fn big_h<S: Scalar>(&self, a: S, b: S) -> S {
        a * self.h1 + b * self.h2 + self.h0
    }
}

impl ClosedForm for Planar {
    fn n(&self) -> usize {
        1
    }
    fn m(&self) -> usize {
        1
    }
    fn bounds(&self) -> &[(f64, f64)] {
        &HALF_LINE
    }
    fn f<S: Scalar>(&self, p: &[S], _z: &[S], out: &mut [S]) {
        out[0] = self.big_f(p[0]);
    }
    fn g<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        out[0] = z[0] * self.big_g(p[0], z[0]);
    }
    fn h<S: Scalar>(&self, p: &[S], z: &[S], out: &mut [S]) {
        out[0] = z[0] * self.big_h(p[0], z[0]);
    }
    fn gz<S: Scalar>(&self, _j: usize, p: &[S], z: &[S]) -> S {
        self.big_g(p[0], z[0]) + z[0] * self.kb
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![
            ("h0".into(), self.h0),
            ("h1".into(), self.h1),
            ("h2".into(), self.h2),
            ("kb".into(), self.kb),
            ("s".into(), self.s),
            ("w".into(), self.w),
        ]
    }
}

/// Catalog entry: system, chain, and the expression rendering used for
/// config export.
#[derive(Clone)]
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub system: Arc<dyn SlowFastSystem>,
    pub chain: ManifoldChain,
    pub slow_vars: Vec<&'static str>,
    pub fast_vars: Vec<&'static str>,
    pub f: Vec<&'static str>,
    pub g: Vec<&'static str>,
    pub h: Option<Vec<&'static str>>,
}

impl std::fmt::Debug for ModelCatalogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelCatalogEntry")
            .field("name", &self.name)
            .field("chain", &self.chain)
            .finish()
    }
}

pub const MODEL_NAMES: [&str; 4] = ["tradeoff", "switching", "coevolution", "planar"];

fn leg(z: &[f64], j_in: usize, guess: &[f64]) -> LegSpec {
    LegSpec {
        z: z.to_vec(),
        j_in,
        a_guess: guess.to_vec(),
    }
}

pub fn catalog() -> Vec<ModelCatalogEntry> {
    MODEL_NAMES.iter().map(|n| entry(n).expect("catalog name")).collect()
}

pub fn chain_for(name: &str) -> Option<ManifoldChain> {
    entry(name).map(|e| e.chain)
}

pub fn entry(name: &str) -> Option<ModelCatalogEntry> {
    Some(match name {
        "tradeoff" => ModelCatalogEntry {
            name: "tradeoff",
            description: "prey defence trait with a growth/predation trade-off (n=2, m=1)",
            system: Arc::new(Closed(Tradeoff::default())),
            chain: ManifoldChain::new(vec![
                leg(&[0.0], 0, &[5.6, 11.0]),
                leg(&[1.0], 0, &[10.0, 0.36]),
            ]),
            slow_vars: vec!["x", "y"],
            fast_vars: vec!["al"],
            f: vec![
                "x*(al + r - k*x) - x*y*(a*al^2 + b*al + c)/(1 + x)",
                "x*y*(a*al^2 + b*al + c)/(1 + x) - d*y",
            ],
            g: vec!["al*(1 - al)*(1 - y*(2*a*al + b)/(1 + x))"],
            h: None,
        },
        "switching" => ModelCatalogEntry {
            name: "switching",
            description: "predator switching between two prey, rescaled (n=3, m=1)",
            system: Arc::new(Closed(Switching::default())),
            chain: ManifoldChain::new(vec![
                leg(&[0.0], 0, &[0.92, 1.08, 1.50]),
                leg(&[1.0], 0, &[1.08, 0.92, 1.50]),
            ]),
            slow_vars: vec!["p1", "p2", "z"],
            fast_vars: vec!["q"],
            f: vec![
                "(1 - q*z)*p1",
                "(r - (1 - q)*z)*p2",
                "(q*p1 + (1 - q)*p2 - 1)*z",
            ],
            g: vec!["q*(1 - q)*(p1 - p2)"],
            h: None,
        },
        "coevolution" => ModelCatalogEntry {
            name: "coevolution",
            description: "prey and predator traits coevolving (n=2, m=2)",
            system: Arc::new(Closed(Coevolution::default())),
            chain: ManifoldChain::new(vec![
                leg(&[0.0, 0.0], 0, &[0.33, 1.99]),
                leg(&[0.0, 1.0], 1, &[0.92, 0.56]),
                leg(&[1.0, 1.0], 0, &[0.60, 0.55]),
                leg(&[1.0, 0.0], 1, &[0.30, 0.93]),
            ]),
            slow_vars: vec!["x", "y"],
            fast_vars: vec!["al", "be"],
            f: vec![
                "x*(s0 + s1*al)*(1 - x/(k0 + k1*al)) - (r0 + r1*al + r2*be + r3*al*be + r4*be^2)*x*y/(1 + h*x)",
                "c0*(r0 + r1*al + r2*be + r3*al*be + r4*be^2)*x*y/(1 + h*x) - y^1.5*(delta0 + delta1*be)",
            ],
            g: vec![
                "al*(1 - al)*(s1*(1 - x/(k0 + k1*al)) + (s0 + s1*al)*x*k1/(k0 + k1*al)^2 - (r1 + r3*be)*y/(1 + h*x))",
                "be*(1 - be)*(c0*(r2 + r3*al + 2*r4*be)*x/(1 + h*x) - delta1*sqrt(y))",
            ],
            h: None,
        },
        "planar" => ModelCatalogEntry {
            name: "planar",
            description: "planar system a' = eps*F + b*H, b' = b*G with one relaxation cycle (n=1, m=1)",
            system: Arc::new(Closed(Planar::default())),
            chain: ManifoldChain::new(vec![leg(&[0.0], 0, &[-1.57])]),
            slow_vars: vec!["a"],
            fast_vars: vec!["b"],
            f: vec!["1 + s*a + w*a^2"],
            g: vec!["b*(a + kb*b)"],
            h: Some(vec!["b*(h0 + h1*a + h2*b)"]),
        },
        _ => return None,
    })
}

/// Config for a planar system `a' = εF + bH`, `b' = bG` from user-supplied
/// expressions in `a`, `b` and the given parameters.
pub fn planar_template(
    big_f: &str,
    big_g: &str,
    big_h: &str,
    params: BTreeMap<String, f64>,
    a0_guess: f64,
) -> Config {
    Config {
        n: 1,
        m: 1,
        slow_vars: vec!["a".into()],
        fast_vars: vec!["b".into()],
        params,
        f: vec![big_f.into()],
        g: vec![format!("b*({big_g})")],
        h: Some(vec![format!("b*({big_h})")]),
        z_bounds: vec![[Some(0.0), None]],
        chain: ChainConfig {
            legs: vec![LegConfig {
                z: vec![0.0],
                j_in: 1,
                a_guess: vec![a0_guess],
            }],
        },
        tolerances: None,
    }
}

impl ModelCatalogEntry {
    pub fn to_config(&self) -> Config {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Config {
            n: self.system.n(),
            m: self.system.m(),
            slow_vars: strs(&self.slow_vars),
            fast_vars: strs(&self.fast_vars),
            params: self.system.params().into_iter().collect(),
            f: strs(&self.f),
            g: strs(&self.g),
            h: self.h.as_ref().map(|h| strs(h)),
            z_bounds: self
                .system
                .z_bounds()
                .iter()
                .map(|&(lo, hi)| [lo.is_finite().then_some(lo), hi.is_finite().then_some(hi)])
                .collect(),
            chain: ChainConfig {
                legs: self
                    .chain
                    .legs
                    .iter()
                    .map(|l| LegConfig {
                        z: l.z.clone(),
                        j_in: l.j_in + 1,
                        a_guess: l.a_guess.clone(),
                    })
                    .collect(),
            },
            tolerances: None,
        }
    }
}
