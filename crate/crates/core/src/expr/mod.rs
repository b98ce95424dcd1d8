//! Infix expression parser and interpreter with forward-mode derivatives.

mod dual;

pub use dual::{Dual, Scalar};

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: expected one of {}", expected.join(", "))]
    Syntax { offset: usize, expected: Vec<String> },
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error in `{subexpr}`")]
    Domain { subexpr: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Func::Exp => x.exp(),
            Func::Ln => x.ln(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(name) => f.write_str(name),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

pub fn parse(source: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.expected(&["operator", "end of input"]));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expected(&self, what: &[&str]) -> ExprError {
        ExprError::Syntax {
            offset: self.pos,
            expected: what.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    // `^` binds tighter than unary minus and associates to the right:
    // -x^2 = -(x^2), a^b^c = a^(b^c), 2^-1 is allowed.
    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        const START: [&str; 4] = ["number", "identifier", "(", "-"];
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.expected(&[")"]));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos])
                    .expect("identifier bytes are ASCII")
                    .to_string();
                if self.peek() == Some(b'(') {
                    let func = Func::from_name(&name).ok_or(ExprError::UnknownFunction {
                        name,
                        offset: start,
                    })?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    if self.peek() != Some(b')') {
                        return Err(self.expected(&[")"]));
                    }
                    self.pos += 1;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.expected(&START)),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            self.pos = start;
            return Err(self.expected(&["digit"]));
        }
        if let Some(b'e' | b'E') = self.src.get(self.pos) {
            let mark = self.pos;
            self.pos += 1;
            if let Some(b'+' | b'-') = self.src.get(self.pos) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                // not an exponent after all, e.g. `2e` is a syntax error
                self.pos = mark + 1;
                return Err(self.expected(&["digit"]));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ASCII literal");
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ExprError::Syntax {
                offset: start,
                expected: vec!["number".into()],
            })
    }
}

/// Expression with variables resolved to slot indices for fast repeated
/// evaluation.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    root: Node,
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>, Arc<str>),
    PowI(Box<Node>, i32, Arc<str>),
    PowF(Box<Node>, f64, Arc<str>),
    Pow(Box<Node>, Box<Node>, Arc<str>),
    Call(Func, Box<Node>, Arc<str>),
}

impl Expr {
    /// Resolve variable names against `names`; slot `k` is `names[k]`.
    pub fn bind(&self, names: &[String]) -> Result<BoundExpr, ExprError> {
        Ok(BoundExpr {
            root: self.bind_node(names)?,
        })
    }

    fn bind_node(&self, names: &[String]) -> Result<Node, ExprError> {
        let b = |e: &Expr| e.bind_node(names).map(Box::new);
        Ok(match self {
            Expr::Const(c) => Node::Const(*c),
            Expr::Var(v) => Node::Slot(
                names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| ExprError::Unbound(v.clone()))?,
            ),
            Expr::Neg(a) => Node::Neg(b(a)?),
            Expr::Bin(op, l, r) => match op {
                BinOp::Add => Node::Add(b(l)?, b(r)?),
                BinOp::Sub => Node::Sub(b(l)?, b(r)?),
                BinOp::Mul => Node::Mul(b(l)?, b(r)?),
                BinOp::Div => Node::Div(b(l)?, b(r)?, self.to_string().into()),
                BinOp::Pow => match const_value(r) {
                    Some(c) if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 => {
                        Node::PowI(b(l)?, c as i32, self.to_string().into())
                    }
                    Some(c) => Node::PowF(b(l)?, c, self.to_string().into()),
                    None => Node::Pow(b(l)?, b(r)?, self.to_string().into()),
                },
            },
            Expr::Call(f, a) => Node::Call(*f, b(a)?, self.to_string().into()),
        })
    }

    /// Every variable name referenced, in first-occurrence order.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Bin(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }
}

// Exponents written as literals (possibly negated) get the cheaper and
// sign-tolerant integer/real power paths.
fn const_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Const(c) => Some(*c),
        Expr::Neg(a) => const_value(a).map(|c| -c),
        _ => None,
    }
}

impl BoundExpr {
    pub fn eval<S: Scalar>(&self, slots: &[S]) -> Result<S, ExprError> {
        self.root.eval(slots)
    }
}

fn checked<S: Scalar>(v: S, sub: &Arc<str>) -> Result<S, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::Domain {
            subexpr: sub.to_string(),
        })
    }
}

impl Node {
    fn eval<S: Scalar>(&self, s: &[S]) -> Result<S, ExprError> {
        Ok(match self {
            Node::Const(c) => S::cst(*c),
            Node::Slot(k) => s[*k],
            Node::Neg(a) => -a.eval(s)?,
            Node::Add(a, b) => a.eval(s)? + b.eval(s)?,
            Node::Sub(a, b) => a.eval(s)? - b.eval(s)?,
            Node::Mul(a, b) => a.eval(s)? * b.eval(s)?,
            Node::Div(a, b, sub) => {
                let den = b.eval(s)?;
                if den.re() == 0.0 {
                    return Err(ExprError::Domain {
                        subexpr: sub.to_string(),
                    });
                }
                checked(a.eval(s)? / den, sub)?
            }
            Node::PowI(a, n, sub) => checked(a.eval(s)?.powi(*n), sub)?,
            Node::PowF(a, c, sub) => {
                let base = a.eval(s)?;
                if base.re() < 0.0 {
                    return Err(ExprError::Domain {
                        subexpr: sub.to_string(),
                    });
                }
                checked(base.powf(*c), sub)?
            }
            Node::Pow(a, b, sub) => {
                let base = a.eval(s)?;
                if base.re() <= 0.0 {
                    return Err(ExprError::Domain {
                        subexpr: sub.to_string(),
                    });
                }
                checked(base.pow(b.eval(s)?), sub)?
            }
            Node::Call(f, a, sub) => {
                let x = a.eval(s)?;
                let bad = match f {
                    Func::Ln => x.re() <= 0.0,
                    Func::Sqrt => x.re() < 0.0,
                    _ => false,
                };
                if bad {
                    return Err(ExprError::Domain {
                        subexpr: sub.to_string(),
                    });
                }
                checked(f.apply(x), sub)?
            }
        })
    }
}

/// Evaluate `ast` and its partial derivative with respect to `seed`.
pub fn eval_dual(
    ast: &Expr,
    bindings: &HashMap<String, f64>,
    seed: &str,
) -> Result<(f64, f64), ExprError> {
    if !bindings.contains_key(seed) {
        return Err(ExprError::Unbound(seed.to_string()));
    }
    let names: Vec<String> = bindings.keys().cloned().collect();
    let slots: Vec<Dual> = names
        .iter()
        .map(|n| {
            let v = bindings[n];
            if n == seed {
                Dual::var(v)
            } else {
                Dual::cst(v)
            }
        })
        .collect();
    let d = ast.bind(&names)?.eval(&slots)?;
    Ok((d.value, d.deriv))
}

/// Plain evaluation against a name map.
pub fn eval(ast: &Expr, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
    let names: Vec<String> = bindings.keys().cloned().collect();
    let slots: Vec<f64> = names.iter().map(|n| bindings[n]).collect();
    ast.bind(&names)?.eval(&slots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(n: &str) -> Box<Expr> {
        Box::new(Expr::Var(n.into()))
    }

    fn env(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_logistic_term() {
        let e = parse("x*(r - k*x)").unwrap();
        let want = Expr::Bin(
            BinOp::Mul,
            var("x"),
            Box::new(Expr::Bin(
                BinOp::Sub,
                var("r"),
                Box::new(Expr::Bin(BinOp::Mul, var("k"), var("x"))),
            )),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn parses_selection_gradient() {
        let e = parse("1 - y*(2*a*al + b)/(1 + x)").unwrap();
        let b = env(&[("y", 11.03), ("a", -0.1), ("al", 0.0), ("b", 3.0), ("x", 5.57)]);
        let v = eval(&e, &b).unwrap();
        assert!((v - (1.0 - 3.0 * 11.03 / 6.57)).abs() < 1e-14);
        match e {
            Expr::Bin(BinOp::Sub, l, r) => {
                assert_eq!(*l, Expr::Const(1.0));
                assert!(matches!(*r, Expr::Bin(BinOp::Div, _, _)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
    }

    #[test]
    fn unbalanced_paren_reports_offset() {
        match parse("exp(") {
            Err(ExprError::Syntax { offset, expected }) => {
                assert_eq!(offset, 4);
                assert!(expected.contains(&"number".to_string()));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("(x"), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(parse("x +"), Err(ExprError::Syntax { offset: 3, .. })));
        assert!(matches!(parse("x y"), Err(ExprError::Syntax { offset: 2, .. })));
    }

    #[test]
    fn unknown_function() {
        assert_eq!(
            parse("1 + tanh(x)"),
            Err(ExprError::UnknownFunction {
                name: "tanh".into(),
                offset: 4
            })
        );
    }

    #[test]
    fn precedence_and_associativity() {
        let b = env(&[("x", 2.0)]);
        let v = |s: &str| eval(&parse(s).unwrap(), &b).unwrap();
        assert_eq!(v("-x^2"), -4.0);
        assert_eq!(v("2^3^2"), 512.0);
        assert_eq!(v("2^-1"), 0.5);
        assert_eq!(v("8/2/2"), 2.0);
        assert_eq!(v("1 - 2 - 3"), -4.0);
        assert_eq!(v("2*x^2 + 1e-1*10"), 9.0);
        assert_eq!(v("(-x)^2"), 4.0);
    }

    #[test]
    fn square_derivative() {
        let e = parse("x^2").unwrap();
        assert_eq!(eval_dual(&e, &env(&[("x", 3.0)]), "x").unwrap(), (9.0, 6.0));
    }

    #[test]
    fn fast_equation_slope_at_boundary() {
        let e = parse("al*(1-al)*(1 - y*(2*a*al+b)/(1+x))").unwrap();
        let b = env(&[("al", 0.0), ("a", -0.1), ("b", 3.0), ("x", 5.57), ("y", 11.03)]);
        let (v, d) = eval_dual(&e, &b, "al").unwrap();
        assert_eq!(v, 0.0);
        assert!((d - (1.0 - 3.0 * 11.03 / 6.57)).abs() < 1e-14);
    }

    #[test]
    fn domain_errors_name_the_subexpression() {
        let b = env(&[("x", 0.0)]);
        match eval_dual(&parse("1 + ln(x)").unwrap(), &b, "x") {
            Err(ExprError::Domain { subexpr }) => assert_eq!(subexpr, "ln(x)"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            eval(&parse("1/x").unwrap(), &b),
            Err(ExprError::Domain { .. })
        ));
        let neg = env(&[("x", -1.0)]);
        assert!(eval(&parse("x^1.5").unwrap(), &neg).is_err());
        assert_eq!(eval(&parse("x^3").unwrap(), &neg).unwrap(), -1.0);
    }

    #[test]
    fn unbound_variable() {
        let e = parse("x + z").unwrap();
        assert_eq!(
            eval(&e, &env(&[("x", 1.0)])),
            Err(ExprError::Unbound("z".into()))
        );
    }

    #[test]
    fn non_constant_exponent() {
        let e = parse("x^y").unwrap();
        let b = env(&[("x", 2.0), ("y", 3.0)]);
        let (v, dy) = eval_dual(&e, &b, "y").unwrap();
        assert!((v - 8.0).abs() < 1e-12);
        assert!((dy - 8.0 * 2f64.ln()).abs() < 1e-12);
    }
}
