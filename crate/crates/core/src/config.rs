//! JSON system description and the expression-backed system built from it.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::expr::{parse, BoundExpr, Dual, ExprError, Scalar};
use crate::system::{LegSpec, ManifoldChain, SlowFastSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub n: usize,
    pub m: usize,
    pub slow_vars: Vec<String>,
    pub fast_vars: Vec<String>,
    pub params: BTreeMap<String, f64>,
    pub f: Vec<String>,
    pub g: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<String>>,
    pub z_bounds: Vec<[Option<f64>; 2]>,
    pub chain: ChainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<ToleranceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub legs: Vec<LegConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegConfig {
    pub z: Vec<f64>,
    /// One-based.
    pub j_in: usize,
    pub a_guess: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton: Option<f64>,
}

/// Config problem located by a JSON pointer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

fn err(pointer: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        pointer: pointer.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy)]
enum Kind {
    UInt,
    Number,
    NumberOrNull,
    Str,
}

fn check_kind(v: &Value, kind: Kind, ptr: &str) -> Result<(), ConfigError> {
    let ok = match kind {
        Kind::UInt => v.as_u64().is_some(),
        Kind::Number => v.is_number(),
        Kind::NumberOrNull => v.is_number() || v.is_null(),
        Kind::Str => v.is_string(),
    };
    if ok {
        Ok(())
    } else {
        let want = match kind {
            Kind::UInt => "a non-negative integer",
            Kind::Number => "a number",
            Kind::NumberOrNull => "a number or null",
            Kind::Str => "a string",
        };
        Err(err(ptr, format!("expected {want}")))
    }
}

fn field<'a>(obj: &'a Value, key: &str, ptr: &str) -> Result<&'a Value, ConfigError> {
    obj.get(key)
        .ok_or_else(|| err(format!("{ptr}/{key}"), "missing required field"))
}

fn array<'a>(v: &'a Value, ptr: &str) -> Result<&'a Vec<Value>, ConfigError> {
    v.as_array().ok_or_else(|| err(ptr, "expected an array"))
}

fn object<'a>(
    v: &'a Value,
    ptr: &str,
) -> Result<&'a serde_json::Map<String, Value>, ConfigError> {
    v.as_object().ok_or_else(|| err(ptr, "expected an object"))
}

fn array_of(v: &Value, kind: Kind, len: Option<usize>, ptr: &str) -> Result<(), ConfigError> {
    let a = array(v, ptr)?;
    if let Some(len) = len {
        if a.len() != len {
            return Err(err(ptr, format!("expected {len} entries, found {}", a.len())));
        }
    }
    for (k, item) in a.iter().enumerate() {
        check_kind(item, kind, &format!("{ptr}/{k}"))?;
    }
    Ok(())
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Config, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| err("", e.to_string()))?;
        Self::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<Config, ConfigError> {
        object(v, "")?;
        let n_v = field(v, "n", "")?;
        check_kind(n_v, Kind::UInt, "/n")?;
        let m_v = field(v, "m", "")?;
        check_kind(m_v, Kind::UInt, "/m")?;
        let n = n_v.as_u64().unwrap_or(0) as usize;
        let m = m_v.as_u64().unwrap_or(0) as usize;
        if n == 0 {
            return Err(err("/n", "must be positive"));
        }
        if m == 0 {
            return Err(err("/m", "must be positive"));
        }
        array_of(field(v, "slow_vars", "")?, Kind::Str, Some(n), "/slow_vars")?;
        array_of(field(v, "fast_vars", "")?, Kind::Str, Some(m), "/fast_vars")?;
        let params = object(field(v, "params", "")?, "/params")?;
        for (k, pv) in params {
            check_kind(pv, Kind::Number, &format!("/params/{k}"))?;
        }
        array_of(field(v, "f", "")?, Kind::Str, Some(n), "/f")?;
        array_of(field(v, "g", "")?, Kind::Str, Some(m), "/g")?;
        if let Some(h) = v.get("h") {
            array_of(h, Kind::Str, Some(n), "/h")?;
        }
        let zb = array(field(v, "z_bounds", "")?, "/z_bounds")?;
        if zb.len() != m {
            return Err(err("/z_bounds", format!("expected {m} entries, found {}", zb.len())));
        }
        for (j, b) in zb.iter().enumerate() {
            array_of(b, Kind::NumberOrNull, Some(2), &format!("/z_bounds/{j}"))?;
        }
        let chain = field(v, "chain", "")?;
        object(chain, "/chain")?;
        let legs = array(field(chain, "legs", "/chain")?, "/chain/legs")?;
        if legs.is_empty() {
            return Err(err("/chain/legs", "at least one leg is required"));
        }
        for (i, leg) in legs.iter().enumerate() {
            let p = format!("/chain/legs/{i}");
            object(leg, &p)?;
            array_of(field(leg, "z", &p)?, Kind::Number, Some(m), &format!("{p}/z"))?;
            check_kind(field(leg, "j_in", &p)?, Kind::UInt, &format!("{p}/j_in"))?;
            array_of(
                field(leg, "a_guess", &p)?,
                Kind::Number,
                Some(n),
                &format!("{p}/a_guess"),
            )?;
        }
        if let Some(t) = v.get("tolerances") {
            let t = object(t, "/tolerances")?;
            for (k, tv) in t {
                check_kind(tv, Kind::Number, &format!("/tolerances/{k}"))?;
            }
        }
        let cfg: Config = serde_json::from_value(v.clone()).map_err(|e| err("", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut seen: Vec<&str> = Vec::new();
        let names = self
            .slow_vars
            .iter()
            .map(|s| ("/slow_vars", s))
            .chain(self.fast_vars.iter().map(|s| ("/fast_vars", s)))
            .chain(self.params.keys().map(|s| ("/params", s)));
        for (ptr, name) in names {
            if name == "eps" {
                return Err(err(ptr, "`eps` is reserved"));
            }
            let valid = name
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(err(ptr, format!("`{name}` is not a valid identifier")));
            }
            if seen.contains(&name.as_str()) {
                return Err(err(ptr, format!("`{name}` is declared twice")));
            }
            seen.push(name);
        }
        for (j, b) in self.z_bounds.iter().enumerate() {
            let lo = b[0].unwrap_or(f64::NEG_INFINITY);
            let hi = b[1].unwrap_or(f64::INFINITY);
            if !(lo < hi) {
                return Err(err(format!("/z_bounds/{j}"), "lower bound must be below upper"));
            }
        }
        for (i, leg) in self.chain.legs.iter().enumerate() {
            if leg.j_in < 1 || leg.j_in > self.m {
                return Err(err(
                    format!("/chain/legs/{i}/j_in"),
                    format!("must be between 1 and {}", self.m),
                ));
            }
        }
        if let Some(t) = &self.tolerances {
            for (k, v) in [("rtol", t.rtol), ("atol", t.atol), ("newton", t.newton)] {
                if let Some(v) = v {
                    if !(v > 0.0) {
                        return Err(err(format!("/tolerances/{k}"), "must be positive"));
                    }
                }
            }
        }
        ExprSystem::from_config(self).map(|_| ())
    }

    pub fn chain(&self) -> ManifoldChain {
        ManifoldChain::new(
            self.chain
                .legs
                .iter()
                .map(|l| LegSpec {
                    z: l.z.clone(),
                    j_in: l.j_in - 1,
                    a_guess: l.a_guess.clone(),
                })
                .collect(),
        )
    }

    pub fn system(&self) -> Result<ExprSystem, ConfigError> {
        ExprSystem::from_config(self)
    }
}

/// System whose right-hand sides are parsed expressions.
#[derive(Debug, Clone)]
pub struct ExprSystem {
    n: usize,
    m: usize,
    bounds: Vec<(f64, f64)>,
    f: Vec<BoundExpr>,
    g: Vec<BoundExpr>,
    h: Option<Vec<BoundExpr>>,
    params: Vec<(String, f64)>,
}

fn compile(src: &[String], names: &[String], ptr: &str) -> Result<Vec<BoundExpr>, ConfigError> {
    src.iter()
        .enumerate()
        .map(|(k, s)| {
            let here = format!("{ptr}/{k}");
            let ast = parse(s).map_err(|e| err(&here, e.to_string()))?;
            ast.bind(names).map_err(|e| match e {
                ExprError::Unbound(v) => err(&here, format!("unknown name `{v}`")),
                other => err(&here, other.to_string()),
            })
        })
        .collect()
}

impl ExprSystem {
    pub fn from_config(cfg: &Config) -> Result<ExprSystem, ConfigError> {
        let mut names: Vec<String> = cfg.slow_vars.clone();
        names.extend(cfg.fast_vars.iter().cloned());
        names.extend(cfg.params.keys().cloned());
        names.push("eps".into());
        let f = compile(&cfg.f, &names, "/f")?;
        let g = compile(&cfg.g, &names, "/g")?;
        let h = match &cfg.h {
            Some(h) => Some(compile(h, &names, "/h")?),
            None => None,
        };
        Ok(ExprSystem {
            n: cfg.n,
            m: cfg.m,
            bounds: cfg
                .z_bounds
                .iter()
                .map(|b| {
                    (
                        b[0].unwrap_or(f64::NEG_INFINITY),
                        b[1].unwrap_or(f64::INFINITY),
                    )
                })
                .collect(),
            f,
            g,
            h,
            params: cfg.params.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        })
    }

    fn slots<S: Scalar>(&self, p: &[S], z: &[S], eps: f64) -> Vec<S> {
        let mut s = Vec::with_capacity(self.n + self.m + self.params.len() + 1);
        s.extend_from_slice(p);
        s.extend_from_slice(z);
        s.extend(self.params.iter().map(|(_, v)| S::cst(*v)));
        s.push(S::cst(eps));
        s
    }

    fn eval_all(exprs: &[BoundExpr], slots: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(exprs) {
            *o = e.eval(slots).unwrap_or(f64::NAN);
        }
    }

    fn seeded(&self, p: &[f64], z: &[f64], eps: f64, slot: usize) -> Vec<Dual> {
        let pd: Vec<Dual> = p.iter().map(|&v| Dual::cst(v)).collect();
        let zd: Vec<Dual> = z.iter().map(|&v| Dual::cst(v)).collect();
        let mut s = self.slots(&pd, &zd, eps);
        s[slot].deriv = 1.0;
        s
    }
}

impl SlowFastSystem for ExprSystem {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn z_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn f(&self, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        Self::eval_all(&self.f, &self.slots(p, z, eps), out);
    }
    fn g(&self, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        Self::eval_all(&self.g, &self.slots(p, z, eps), out);
    }
    fn h(&self, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        match &self.h {
            Some(h) => Self::eval_all(h, &self.slots(p, z, eps), out),
            None => out.fill(0.0),
        }
    }
    fn gz(&self, j: usize, p: &[f64], z: &[f64], eps: f64) -> f64 {
        let s = self.seeded(p, z, eps, self.n + j);
        self.g[j].eval(&s).map_or(f64::NAN, |d| d.deriv)
    }
    fn df_dp(&self, p: &[f64], z: &[f64], eps: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n, self.n);
        for k in 0..self.n {
            let s = self.seeded(p, z, eps, k);
            for (i, e) in self.f.iter().enumerate() {
                jac[(i, k)] = e.eval(&s).map_or(f64::NAN, |d| d.deriv);
            }
        }
        jac
    }
    fn dh_dz(&self, j: usize, p: &[f64], z: &[f64], eps: f64, out: &mut [f64]) {
        match &self.h {
            Some(h) => {
                let s = self.seeded(p, z, eps, self.n + j);
                for (o, e) in out.iter_mut().zip(h) {
                    *o = e.eval(&s).map_or(f64::NAN, |d| d.deriv);
                }
            }
            None => out.fill(0.0),
        }
    }
    fn params(&self) -> Vec<(String, f64)> {
        self.params.clone()
    }
}
