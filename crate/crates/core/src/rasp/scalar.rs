//! The closed expression language used for elementwise functions and lambda
//! predicates.

use std::fmt;

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge
        )
    }
}

/// A pure expression over bound variables `Var(0)`, `Var(1)`, ...
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Lit(Value),
    Var(usize),
    Unary(UnaryOp, Box<ScalarExpr>),
    Binary(BinOp, Box<ScalarExpr>, Box<ScalarExpr>),
    If(Box<ScalarExpr>, Box<ScalarExpr>, Box<ScalarExpr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScalarError {
    #[error("type mismatch: {0}")]
    Type(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("unbound variable #{0}")]
    Unbound(usize),
}

impl ScalarExpr {
    pub fn lit(v: impl Into<Value>) -> Self {
        ScalarExpr::Lit(v.into())
    }

    pub fn var(i: usize) -> Self {
        ScalarExpr::Var(i)
    }

    pub fn unary(op: UnaryOp, e: ScalarExpr) -> Self {
        ScalarExpr::Unary(op, Box::new(e))
    }

    pub fn binary(op: BinOp, a: ScalarExpr, b: ScalarExpr) -> Self {
        ScalarExpr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn cond(c: ScalarExpr, t: ScalarExpr, e: ScalarExpr) -> Self {
        ScalarExpr::If(Box::new(c), Box::new(t), Box::new(e))
    }

    pub fn identity() -> Self {
        ScalarExpr::Var(0)
    }

    pub fn eval(&self, args: &[Value]) -> Result<Value, ScalarError> {
        match self {
            ScalarExpr::Lit(v) => Ok(v.clone()),
            ScalarExpr::Var(i) => args.get(*i).cloned().ok_or(ScalarError::Unbound(*i)),
            ScalarExpr::Unary(op, e) => {
                let v = e.eval(args)?;
                match op {
                    UnaryOp::Not => Ok(Value::Bool(!v.truthy())),
                    UnaryOp::Neg => v
                        .as_f64()
                        .map(|x| Value::num(-x))
                        .ok_or_else(|| ScalarError::Type(format!("cannot negate {v}"))),
                }
            }
            ScalarExpr::Binary(op, a, b) => {
                let x = a.eval(args)?;
                // short-circuit like the host languages RASP is usually embedded in
                match op {
                    BinOp::And if !x.truthy() => return Ok(Value::Bool(false)),
                    BinOp::Or if x.truthy() => return Ok(Value::Bool(true)),
                    _ => {}
                }
                let y = b.eval(args)?;
                apply_binary(*op, &x, &y)
            }
            ScalarExpr::If(c, t, e) => {
                if c.eval(args)?.truthy() {
                    t.eval(args)
                } else {
                    e.eval(args)
                }
            }
        }
    }

    /// Number of variables the expression reads (highest index + 1).
    pub fn arity(&self) -> usize {
        match self {
            ScalarExpr::Lit(_) => 0,
            ScalarExpr::Var(i) => i + 1,
            ScalarExpr::Unary(_, e) => e.arity(),
            ScalarExpr::Binary(_, a, b) => a.arity().max(b.arity()),
            ScalarExpr::If(c, t, e) => c.arity().max(t.arity()).max(e.arity()),
        }
    }

    /// Replaces every variable `i` with `subst[i]`.
    pub fn substitute(&self, subst: &[ScalarExpr]) -> ScalarExpr {
        match self {
            ScalarExpr::Lit(v) => ScalarExpr::Lit(v.clone()),
            ScalarExpr::Var(i) => subst[*i].clone(),
            ScalarExpr::Unary(op, e) => ScalarExpr::unary(*op, e.substitute(subst)),
            ScalarExpr::Binary(op, a, b) => {
                ScalarExpr::binary(*op, a.substitute(subst), b.substitute(subst))
            }
            ScalarExpr::If(c, t, e) => {
                ScalarExpr::cond(c.substitute(subst), t.substitute(subst), e.substitute(subst))
            }
        }
    }

    /// If the expression is affine in its variables, returns the coefficient
    /// per variable and the constant term.
    pub fn as_affine(&self, nvars: usize) -> Option<(Vec<f64>, f64)> {
        match self {
            ScalarExpr::Lit(v) => Some((vec![0.0; nvars], v.as_f64()?)),
            ScalarExpr::Var(i) => {
                if *i >= nvars {
                    return None;
                }
                let mut c = vec![0.0; nvars];
                c[*i] = 1.0;
                Some((c, 0.0))
            }
            ScalarExpr::Unary(UnaryOp::Neg, e) => {
                let (c, k) = e.as_affine(nvars)?;
                Some((c.into_iter().map(|x| -x).collect(), -k))
            }
            ScalarExpr::Binary(op @ (BinOp::Add | BinOp::Sub), a, b) => {
                let (ca, ka) = a.as_affine(nvars)?;
                let (cb, kb) = b.as_affine(nvars)?;
                let s = if *op == BinOp::Add { 1.0 } else { -1.0 };
                let c = ca.iter().zip(&cb).map(|(x, y)| x + s * y).collect();
                Some((c, ka + s * kb))
            }
            ScalarExpr::Binary(BinOp::Mul, a, b) => {
                let (ca, ka) = a.as_affine(nvars)?;
                let (cb, kb) = b.as_affine(nvars)?;
                if ca.iter().all(|x| *x == 0.0) {
                    Some((cb.iter().map(|x| x * ka).collect(), ka * kb))
                } else if cb.iter().all(|x| *x == 0.0) {
                    Some((ca.iter().map(|x| x * kb).collect(), ka * kb))
                } else {
                    None
                }
            }
            ScalarExpr::Binary(BinOp::Div, a, b) => {
                let (ca, ka) = a.as_affine(nvars)?;
                let (cb, kb) = b.as_affine(nvars)?;
                if cb.iter().any(|x| *x != 0.0) || kb == 0.0 {
                    return None;
                }
                Some((ca.iter().map(|x| x / kb).collect(), ka / kb))
            }
            _ => None,
        }
    }

    /// Renders the expression with the given variable names, fully
    /// parenthesised so that it reparses to the same tree.
    pub fn display_with<'a>(&'a self, names: &'a [&'a str]) -> impl fmt::Display + 'a {
        DisplayExpr { expr: self, names }
    }
}

fn apply_binary(op: BinOp, x: &Value, y: &Value) -> Result<Value, ScalarError> {
    let numeric = |what: &str| -> Result<(f64, f64), ScalarError> {
        match (x.as_f64(), y.as_f64()) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(ScalarError::Type(format!("cannot {what} {x} and {y}"))),
        }
    };
    let cmp = || x.compare(y).map_err(|e| ScalarError::Type(e.to_string()));
    use std::cmp::Ordering::*;
    Ok(match op {
        BinOp::Add => {
            let (a, b) = numeric("add")?;
            Value::num(a + b)
        }
        BinOp::Sub => {
            let (a, b) = numeric("subtract")?;
            Value::num(a - b)
        }
        BinOp::Mul => {
            let (a, b) = numeric("multiply")?;
            Value::num(a * b)
        }
        BinOp::Div => {
            let (a, b) = numeric("divide")?;
            if b == 0.0 {
                return Err(ScalarError::DivisionByZero);
            }
            Value::num(a / b)
        }
        BinOp::Eq => Value::Bool(cmp()? == Equal),
        BinOp::Ne => Value::Bool(cmp()? != Equal),
        BinOp::Lt => Value::Bool(cmp()? == Less),
        BinOp::Le => Value::Bool(cmp()? != Greater),
        BinOp::Gt => Value::Bool(cmp()? == Greater),
        BinOp::Ge => Value::Bool(cmp()? != Less),
        BinOp::And => Value::Bool(x.truthy() && y.truthy()),
        BinOp::Or => Value::Bool(x.truthy() || y.truthy()),
    })
}

struct DisplayExpr<'a> {
    expr: &'a ScalarExpr,
    names: &'a [&'a str],
}

impl<'a> fmt::Display for DisplayExpr<'a> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names;
        let sub = |e: &'a ScalarExpr| DisplayExpr { expr: e, names };
        match self.expr {
            ScalarExpr::Lit(v) => write_literal(f, v),
            ScalarExpr::Var(i) => match self.names.get(*i) {
                Some(n) => f.write_str(n),
                None => write!(f, "_{i}"),
            },
            ScalarExpr::Unary(UnaryOp::Neg, e) => write!(f, "(-{})", sub(e)),
            ScalarExpr::Unary(UnaryOp::Not, e) => write!(f, "(not {})", sub(e)),
            ScalarExpr::Binary(op, a, b) => write!(f, "({} {} {})", sub(a), op.symbol(), sub(b)),
            ScalarExpr::If(c, t, e) => {
                write!(f, "(if {} then {} else {})", sub(c), sub(t), sub(e))
            }
        }
    }
}

/// Writes a value as a source literal (strings quoted, numbers in shortest
/// round-trip form).
pub fn write_literal(f: &mut impl fmt::Write, v: &Value) -> fmt::Result {
    match v {
        Value::Str(s) => {
            f.write_char('"')?;
            for c in s.chars() {
                match c {
                    '"' => f.write_str("\\\"")?,
                    '\\' => f.write_str("\\\\")?,
                    '\n' => f.write_str("\\n")?,
                    c => f.write_char(c)?,
                }
            }
            f.write_char('"')
        }
        Value::Num(x) if *x < 0.0 => write!(f, "(-{})", -x),
        Value::Num(x) => write!(f, "{x}"),
        Value::Bool(b) => write!(f, "{b}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> ScalarExpr {
        ScalarExpr::var(0)
    }

    #[test]
    fn arithmetic_and_comparison() {
        let e = ScalarExpr::binary(
            BinOp::Eq,
            ScalarExpr::binary(BinOp::Mul, x(), ScalarExpr::lit(3.0)),
            ScalarExpr::lit(6.0),
        );
        assert_eq!(e.eval(&[Value::num(2.0)]).unwrap(), Value::Bool(true));
        assert_eq!(e.eval(&[Value::num(1.0)]).unwrap(), Value::Bool(false));
    }

    #[test]
    fn string_number_comparison_is_an_error() {
        let e = ScalarExpr::binary(BinOp::Lt, x(), ScalarExpr::lit(1.0));
        assert!(matches!(
            e.eval(&[Value::str("a")]),
            Err(ScalarError::Type(_))
        ));
    }

    #[test]
    fn division_by_zero() {
        let e = ScalarExpr::binary(BinOp::Div, ScalarExpr::lit(1.0), x());
        assert_eq!(e.eval(&[Value::num(0.0)]), Err(ScalarError::DivisionByZero));
    }

    #[test]
    fn affine_detection() {
        // (a - b) / 2 + 1
        let e = ScalarExpr::binary(
            BinOp::Add,
            ScalarExpr::binary(
                BinOp::Div,
                ScalarExpr::binary(BinOp::Sub, ScalarExpr::var(0), ScalarExpr::var(1)),
                ScalarExpr::lit(2.0),
            ),
            ScalarExpr::lit(1.0),
        );
        assert_eq!(e.as_affine(2), Some((vec![0.5, -0.5], 1.0)));
        let nonlinear = ScalarExpr::binary(BinOp::Mul, ScalarExpr::var(0), ScalarExpr::var(1));
        assert_eq!(nonlinear.as_affine(2), None);
    }

    #[test]
    fn truthiness_of_numbers() {
        let e = ScalarExpr::unary(UnaryOp::Not, x());
        assert_eq!(e.eval(&[Value::num(0.0)]).unwrap(), Value::Bool(true));
        assert_eq!(e.eval(&[Value::num(0.25)]).unwrap(), Value::Bool(false));
    }
}
