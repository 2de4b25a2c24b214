//! Scalar expressions for device characteristics.
//!
//! The grammar is intentionally small: numeric literals, the free
//! variable(s), `+ - * /`, integer powers `^n` and the functions `sin` /
//! `cos` (radians). Characteristics use the single variable `u`; the
//! controlled-source coupling function uses two reserved slots `i`, `v`.

use std::fmt;

use thiserror::Error;

/// Variable names accepted by [`parse_expression`].
pub const HOMOGENEOUS_VARS: &[&str] = &["u"];
/// Variable names accepted for controlled-source coupling functions: the
/// controller's current and voltage.
pub const CONTROLLER_VARS: &[&str] = &["i", "v"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("exponent at byte {offset} must be a non-negative integer literal")]
    NonIntegerExponent { offset: usize },
}

/// Expression tree. `Var(k)` refers to the k-th name of the variable table
/// the expression was parsed against.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
}

/// Parse an expression in the homogeneous variable `u`.
pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    parse_expression_in(text, HOMOGENEOUS_VARS)
}

/// Parse an expression against an explicit variable table.
pub fn parse_expression_in(text: &str, vars: &[&str]) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        vars,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

/// Symbolic derivative with respect to the first variable.
pub fn differentiate(e: &Expr) -> Expr {
    e.derivative(0)
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn var(k: usize) -> Self {
        Expr::Var(k)
    }

    /// Evaluate with `vals[k]` bound to `Var(k)`.
    pub fn eval(&self, vals: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(k) => vals[*k],
            Expr::Add(a, b) => a.eval(vals) + b.eval(vals),
            Expr::Sub(a, b) => a.eval(vals) - b.eval(vals),
            Expr::Mul(a, b) => a.eval(vals) * b.eval(vals),
            Expr::Div(a, b) => a.eval(vals) / b.eval(vals),
            Expr::Neg(a) => -a.eval(vals),
            Expr::Pow(a, n) => a.eval(vals).powi(*n as i32),
            Expr::Sin(a) => a.eval(vals).sin(),
            Expr::Cos(a) => a.eval(vals).cos(),
        }
    }

    /// Evaluate a single-variable expression.
    pub fn eval1(&self, u: f64) -> f64 {
        self.eval(std::slice::from_ref(&u))
    }

    /// Exact derivative with respect to `Var(var)`; constants are folded,
    /// nothing else is simplified.
    pub fn derivative(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(k) => Expr::Const(if *k == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.derivative(var), (**b).clone()),
                    mul((**a).clone(), b.derivative(var)),
                ),
                pow((**b).clone(), 2),
            ),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Pow(a, n) => match n {
                0 => Expr::Const(0.0),
                _ => mul(
                    mul(Expr::Const(*n as f64), pow((**a).clone(), n - 1)),
                    a.derivative(var),
                ),
            },
            Expr::Sin(a) => mul(Expr::Cos(a.clone()), a.derivative(var)),
            Expr::Cos(a) => neg(mul(Expr::Sin(a.clone()), a.derivative(var))),
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(k) => Some(*k),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sin(a) | Expr::Cos(a) => a.max_var(),
        }
    }

    pub fn is_const(&self) -> bool {
        self.max_var().is_none()
    }

    /// Canonical, fully parenthesized rendering using the given names.
    pub fn to_string_with(&self, vars: &[&str]) -> String {
        let mut s = String::new();
        self.write(&mut s, vars);
        s
    }

    fn write(&self, out: &mut String, vars: &[&str]) {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    out.push_str(&format!("({c:?})"));
                } else {
                    out.push_str(&format!("{c:?}"));
                }
            }
            Expr::Var(k) => out.push_str(vars.get(*k).copied().unwrap_or("?")),
            Expr::Add(a, b) => bin(out, vars, a, " + ", b),
            Expr::Sub(a, b) => bin(out, vars, a, " - ", b),
            Expr::Mul(a, b) => bin(out, vars, a, " * ", b),
            Expr::Div(a, b) => bin(out, vars, a, " / ", b),
            Expr::Neg(a) => {
                out.push_str("(-");
                a.write(out, vars);
                out.push(')');
            }
            Expr::Pow(a, n) => {
                out.push('(');
                a.write(out, vars);
                out.push_str(&format!("^{n})"));
            }
            Expr::Sin(a) => {
                out.push_str("sin(");
                a.write(out, vars);
                out.push(')');
            }
            Expr::Cos(a) => {
                out.push_str("cos(");
                a.write(out, vars);
                out.push(')');
            }
        }
    }
}

fn bin(out: &mut String, vars: &[&str], a: &Expr, op: &str, b: &Expr) {
    out.push('(');
    a.write(out, vars);
    out.push_str(op);
    b.write(out, vars);
    out.push(')');
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_string_with(HOMOGENEOUS_VARS))
    }
}

fn as_const(e: &Expr) -> Option<f64> {
    match e {
        Expr::Const(c) => Some(*c),
        _ => None,
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => Expr::Const(x + y),
        (Some(x), _) if x == 0.0 => b,
        (_, Some(y)) if y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => Expr::Const(x - y),
        (_, Some(y)) if y == 0.0 => a,
        (Some(x), _) if x == 0.0 => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => Expr::Const(x * y),
        (Some(x), _) | (_, Some(x)) if x == 0.0 => Expr::Const(0.0),
        (Some(x), _) if x == 1.0 => b,
        (_, Some(y)) if y == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) if y != 0.0 => Expr::Const(x / y),
        (Some(x), _) if x == 0.0 => Expr::Const(0.0),
        (_, Some(y)) if y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn pow(a: Expr, n: u32) -> Expr {
    match (as_const(&a), n) {
        (_, 0) => Expr::Const(1.0),
        (_, 1) => a,
        (Some(x), _) => Expr::Const(x.powi(n as i32)),
        _ => Expr::Pow(Box::new(a), n),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> ExprError {
        ExprError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                // Negated literals collapse to a negative constant.
                Ok(neg_literal(self.unary()?))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.atom()?;
        while self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let next = self.src.get(self.pos).copied();
            let bad_follow = matches!(next, Some(b'.') | Some(b'e') | Some(b'E'))
                || next.is_some_and(|c| c.is_ascii_alphabetic());
            if self.pos == start || bad_follow {
                return Err(ExprError::NonIntegerExponent { offset: start });
            }
            let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let n: u32 = digits
                .parse()
                .map_err(|_| ExprError::NonIntegerExponent { offset: start })?;
            base = Expr::Pow(Box::new(base), n);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
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
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                match name {
                    "sin" | "cos" => {
                        self.expect(b'(')?;
                        let arg = Box::new(self.expr()?);
                        self.expect(b')')?;
                        Ok(if name == "sin" {
                            Expr::Sin(arg)
                        } else {
                            Expr::Cos(arg)
                        })
                    }
                    _ => match self.vars.iter().position(|v| *v == name) {
                        Some(k) => Ok(Expr::Var(k)),
                        None => Err(ExprError::UnknownIdentifier {
                            offset: start,
                            name: name.to_string(),
                        }),
                    },
                }
            }
            Some(_) => Err(self.syntax("unexpected character")),
            None => Err(self.syntax("unexpected end of input")),
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
            return Err(ExprError::Syntax {
                offset: start,
                message: "malformed number".into(),
            });
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
                return Err(ExprError::Syntax {
                    offset: save,
                    message: "malformed exponent in number".into(),
                });
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ExprError::Syntax {
                offset: start,
                message: "malformed number".into(),
            })
    }
}

fn neg_literal(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        other => Expr::Neg(Box::new(other)),
    }
}
