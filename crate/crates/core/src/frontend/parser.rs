use std::collections::HashMap;

use super::lexer::{lex, Spanned, Tok};
use super::{FrontendError, ParseError};
use crate::rasp::{
    validate, BinOp, Comparison, ConstantSeq, NodeId, Op, Predicate, Program, ProgramBuilder,
    ScalarExpr, UnaryOp,
};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Num(f64),
    Str(String),
    Bool(bool),
    Ident(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
    List(Vec<Expr>),
    Lambda(Vec<String>, Box<Expr>),
    /// A bare comparison operator passed as a selector predicate.
    PredOp(Comparison),
}

#[derive(Debug, Clone, PartialEq)]
struct Expr {
    kind: Kind,
    line: usize,
    col: usize,
}

enum Stmt {
    Assign(String, Expr),
    Return(Expr),
}

const KEYWORDS: &[&str] = &[
    "and", "or", "not", "if", "then", "else", "true", "false", "return",
];

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.pos + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, msg: impl Into<String>) -> ParseError {
        let (l, c) = self.here();
        ParseError::new(l, c, msg)
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!(
                "expected `{}`, found {}",
                tok.symbol(),
                self.peek().describe()
            )))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(s)
            }
            other => Err(self.error(format!("expected a name, found {}", other.describe()))),
        }
    }

    fn statements(&mut self) -> Result<Vec<Stmt>, ParseError> {
        let mut out = Vec::new();
        loop {
            while *self.peek() == Tok::Semi {
                self.bump();
            }
            if *self.peek() == Tok::Eof {
                return Ok(out);
            }
            if self.is_keyword("return") {
                self.bump();
                out.push(Stmt::Return(self.expr()?));
            } else {
                let name = self.ident()?;
                self.expect(Tok::Assign)?;
                out.push(Stmt::Assign(name, self.expr()?));
            }
        }
    }

    fn mk(&self, kind: Kind, at: (usize, usize)) -> Expr {
        Expr {
            kind,
            line: at.0,
            col: at.1,
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if self.is_keyword("if") {
            let at = self.here();
            self.bump();
            let c = self.expr()?;
            if !self.is_keyword("then") {
                return Err(self.error("expected `then`"));
            }
            self.bump();
            let t = self.expr()?;
            if !self.is_keyword("else") {
                return Err(self.error("expected `else`"));
            }
            self.bump();
            let e = self.expr()?;
            return Ok(self.mk(Kind::If(Box::new(c), Box::new(t), Box::new(e)), at));
        }
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.is_keyword("or") {
            let at = self.here();
            self.bump();
            let rhs = self.and_expr()?;
            lhs = self.mk(Kind::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs)), at);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.not_expr()?;
        while self.is_keyword("and") {
            let at = self.here();
            self.bump();
            let rhs = self.not_expr()?;
            lhs = self.mk(Kind::Binary(BinOp::And, Box::new(lhs), Box::new(rhs)), at);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.is_keyword("not") {
            let at = self.here();
            self.bump();
            let e = self.not_expr()?;
            return Ok(self.mk(Kind::Unary(UnaryOp::Not, Box::new(e)), at));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Tok::EqEq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(lhs),
        };
        let at = self.here();
        self.bump();
        let rhs = self.additive()?;
        Ok(self.mk(Kind::Binary(op, Box::new(lhs), Box::new(rhs)), at))
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let at = self.here();
            self.bump();
            let rhs = self.multiplicative()?;
            lhs = self.mk(Kind::Binary(op, Box::new(lhs), Box::new(rhs)), at);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            let at = self.here();
            self.bump();
            let rhs = self.unary()?;
            lhs = self.mk(Kind::Binary(op, Box::new(lhs), Box::new(rhs)), at);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            let at = self.here();
            self.bump();
            let e = self.unary()?;
            // fold negative number literals so that `-3` is a single literal
            if let Kind::Num(x) = e.kind {
                return Ok(self.mk(Kind::Num(-x), at));
            }
            return Ok(self.mk(Kind::Unary(UnaryOp::Neg, Box::new(e)), at));
        }
        self.primary()
    }

    fn looks_like_lambda(&self) -> bool {
        if *self.peek() != Tok::LParen {
            return false;
        }
        let mut k = 1;
        loop {
            if !matches!(self.peek_at(k), Tok::Ident(_)) {
                return false;
            }
            match self.peek_at(k + 1) {
                Tok::Comma => k += 2,
                Tok::RParen => return *self.peek_at(k + 2) == Tok::Arrow,
                _ => return false,
            }
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.here();
        if self.looks_like_lambda() {
            self.bump();
            let mut params = vec![self.ident()?];
            while *self.peek() == Tok::Comma {
                self.bump();
                params.push(self.ident()?);
            }
            self.expect(Tok::RParen)?;
            self.expect(Tok::Arrow)?;
            let body = self.expr()?;
            return Ok(self.mk(Kind::Lambda(params, Box::new(body)), at));
        }
        match self.bump().tok {
            Tok::Num(x) => Ok(self.mk(Kind::Num(x), at)),
            Tok::Str(s) => Ok(self.mk(Kind::Str(s), at)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::LBracket => {
                let mut items = Vec::new();
                if *self.peek() != Tok::RBracket {
                    items.push(self.expr()?);
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        items.push(self.expr()?);
                    }
                }
                self.expect(Tok::RBracket)?;
                Ok(self.mk(Kind::List(items), at))
            }
            Tok::Ident(s) if s == "true" => Ok(self.mk(Kind::Bool(true), at)),
            Tok::Ident(s) if s == "false" => Ok(self.mk(Kind::Bool(false), at)),
            Tok::Ident(s) if KEYWORDS.contains(&s.as_str()) => Err(ParseError::new(
                at.0,
                at.1,
                format!("unexpected keyword `{s}`"),
            )),
            Tok::Ident(s) => {
                if *self.peek() != Tok::LParen {
                    return Ok(self.mk(Kind::Ident(s), at));
                }
                self.bump();
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    args.push(self.argument()?);
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.argument()?);
                    }
                }
                self.expect(Tok::RParen)?;
                Ok(self.mk(Kind::Call(s, args), at))
            }
            other => Err(ParseError::new(
                at.0,
                at.1,
                format!("unexpected {}", other.describe()),
            )),
        }
    }

    fn argument(&mut self) -> Result<Expr, ParseError> {
        let cmp = match self.peek() {
            Tok::EqEq => Some(Comparison::Eq),
            Tok::Ne => Some(Comparison::Ne),
            Tok::Lt => Some(Comparison::Lt),
            Tok::Le => Some(Comparison::Le),
            Tok::Gt => Some(Comparison::Gt),
            Tok::Ge => Some(Comparison::Ge),
            _ => None,
        };
        if let Some(c) = cmp {
            if matches!(self.peek_at(1), Tok::Comma | Tok::RParen) {
                let at = self.here();
                self.bump();
                return Ok(self.mk(Kind::PredOp(c), at));
            }
        }
        self.expr()
    }
}

/// Result of lowering an expression at the s-op level.
#[derive(Debug, Clone)]
enum Sv {
    Node(NodeId),
    Lit(Value),
    List(Vec<Value>),
}

struct Lowering {
    b: ProgramBuilder,
    env: HashMap<String, NodeId>,
    length: Option<NodeId>,
}

fn err_at(e: &Expr, msg: impl Into<String>) -> ParseError {
    ParseError::new(e.line, e.col, msg)
}

fn fold(e: &Expr, expr: ScalarExpr) -> Result<Value, ParseError> {
    expr.eval(&[]).map_err(|err| err_at(e, err.to_string()))
}

impl Lowering {
    fn is_selector(&self, id: NodeId) -> bool {
        self.b.node(id).op.is_selector()
    }

    fn lookup(&mut self, e: &Expr, name: &str) -> Result<NodeId, ParseError> {
        if let Some(id) = self.env.get(name) {
            return Ok(*id);
        }
        match name {
            "tokens" => Ok(self.b.tokens()),
            "indices" => Ok(self.b.indices()),
            "length" => {
                if let Some(id) = self.length {
                    return Ok(id);
                }
                let id = self.b.length();
                self.length = Some(id);
                Ok(id)
            }
            _ => Err(err_at(e, format!("undefined name `{name}`"))),
        }
    }

    /// Forces a value into an s-op node (literals become constants).
    fn sop(&mut self, e: &Expr, v: Sv) -> Result<NodeId, ParseError> {
        match v {
            Sv::Node(id) if self.is_selector(id) => {
                Err(err_at(e, "expected an s-op, found a selector"))
            }
            Sv::Node(id) => Ok(id),
            Sv::Lit(v) => Ok(self.b.constant(ConstantSeq::Broadcast(v))),
            Sv::List(vs) => Ok(self.b.constant(ConstantSeq::List(vs))),
        }
    }

    fn selector(&mut self, e: &Expr) -> Result<NodeId, ParseError> {
        match self.lower(e)? {
            Sv::Node(id) if self.is_selector(id) => Ok(id),
            _ => Err(err_at(e, "expected a selector")),
        }
    }

    fn lower(&mut self, e: &Expr) -> Result<Sv, ParseError> {
        match &e.kind {
            Kind::Num(x) => Ok(Sv::Lit(Value::num(*x))),
            Kind::Str(s) => Ok(Sv::Lit(Value::str(s.clone()))),
            Kind::Bool(b) => Ok(Sv::Lit(Value::Bool(*b))),
            Kind::Ident(name) => Ok(Sv::Node(self.lookup(e, name)?)),
            Kind::List(items) => {
                let mut vals = Vec::with_capacity(items.len());
                for item in items {
                    match self.lower(item)? {
                        Sv::Lit(v) => vals.push(v),
                        _ => return Err(err_at(item, "list elements must be literals")),
                    }
                }
                Ok(Sv::List(vals))
            }
            Kind::Unary(op, inner) => {
                let v = self.lower(inner)?;
                match v {
                    Sv::Lit(x) => Ok(Sv::Lit(fold(
                        e,
                        ScalarExpr::unary(*op, ScalarExpr::Lit(x)),
                    )?)),
                    Sv::Node(id) if self.is_selector(id) => match op {
                        UnaryOp::Not => Ok(Sv::Node(self.b.select_not(id))),
                        UnaryOp::Neg => Err(err_at(e, "cannot negate a selector")),
                    },
                    other => {
                        let id = self.sop(inner, other)?;
                        let f = ScalarExpr::unary(*op, ScalarExpr::var(0));
                        Ok(Sv::Node(self.b.map(f, id)))
                    }
                }
            }
            Kind::Binary(op, l, r) => {
                let lv = self.lower(l)?;
                let rv = self.lower(r)?;
                let sel = |s: &Self, v: &Sv| matches!(v, Sv::Node(id) if s.is_selector(*id));
                let (ls, rs) = (sel(self, &lv), sel(self, &rv));
                if ls || rs {
                    return match (op, ls && rs) {
                        (BinOp::And, true) => {
                            let (Sv::Node(a), Sv::Node(b)) = (lv, rv) else { unreachable!() };
                            Ok(Sv::Node(self.b.select_and(a, b)))
                        }
                        (BinOp::Or, true) => {
                            let (Sv::Node(a), Sv::Node(b)) = (lv, rv) else { unreachable!() };
                            Ok(Sv::Node(self.b.select_or(a, b)))
                        }
                        _ => Err(err_at(
                            e,
                            format!("operator `{}` cannot be applied to a selector here", op.symbol()),
                        )),
                    };
                }
                match (lv, rv) {
                    (Sv::Lit(a), Sv::Lit(b)) => Ok(Sv::Lit(fold(
                        e,
                        ScalarExpr::binary(*op, ScalarExpr::Lit(a), ScalarExpr::Lit(b)),
                    )?)),
                    (a, Sv::Lit(b)) => {
                        let id = self.sop(l, a)?;
                        let f = ScalarExpr::binary(*op, ScalarExpr::var(0), ScalarExpr::Lit(b));
                        Ok(Sv::Node(self.b.map(f, id)))
                    }
                    (Sv::Lit(a), b) => {
                        let id = self.sop(r, b)?;
                        let f = ScalarExpr::binary(*op, ScalarExpr::Lit(a), ScalarExpr::var(0));
                        Ok(Sv::Node(self.b.map(f, id)))
                    }
                    (a, b) => {
                        let x = self.sop(l, a)?;
                        let y = self.sop(r, b)?;
                        let f = ScalarExpr::binary(*op, ScalarExpr::var(0), ScalarExpr::var(1));
                        Ok(Sv::Node(self.b.sequence_map(f, x, y)))
                    }
                }
            }
            Kind::If(..) => Err(err_at(
                e,
                "`if` is only allowed inside map functions and predicates",
            )),
            Kind::Lambda(..) => Err(err_at(e, "a function is only allowed as a call argument")),
            Kind::PredOp(_) => Err(err_at(e, "a bare predicate is only allowed in `select`")),
            Kind::Call(name, args) => self.call(e, name, args),
        }
    }

    fn call(&mut self, e: &Expr, name: &str, args: &[Expr]) -> Result<Sv, ParseError> {
        let arity = |n: usize| -> Result<(), ParseError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(err_at(
                    e,
                    format!("`{name}` takes {n} argument(s), got {}", args.len()),
                ))
            }
        };
        match name {
            "select" => {
                arity(3)?;
                let kv = self.lower(&args[0])?;
                let keys = self.sop(&args[0], kv)?;
                let qv = self.lower(&args[1])?;
                let queries = self.sop(&args[1], qv)?;
                let predicate = predicate(&args[2])?;
                Ok(Sv::Node(self.b.select(keys, queries, predicate)))
            }
            "aggregate" => {
                arity(2)?;
                let sel = self.selector(&args[0])?;
                let v = self.lower(&args[1])?;
                let sop = self.sop(&args[1], v)?;
                Ok(Sv::Node(self.b.aggregate(sel, sop)))
            }
            "selector_width" => {
                arity(1)?;
                let sel = self.selector(&args[0])?;
                Ok(Sv::Node(self.b.selector_width(sel)))
            }
            "map" | "map2" => {
                let n = if name == "map" { 1 } else { 2 };
                arity(n + 1)?;
                let func = lambda(&args[0], n)?;
                let mut ops = Vec::new();
                for a in &args[1..] {
                    let v = self.lower(a)?;
                    ops.push(self.sop(a, v)?);
                }
                Ok(Sv::Node(if n == 1 {
                    self.b.map(func, ops[0])
                } else {
                    self.b.sequence_map(func, ops[0], ops[1])
                }))
            }
            "numerical" | "categorical" => {
                arity(1)?;
                let v = self.lower(&args[0])?;
                let id = self.sop(&args[0], v)?;
                if name == "numerical" {
                    self.b.numerical(id);
                } else {
                    self.b.categorical(id);
                }
                Ok(Sv::Node(id))
            }
            other => Err(err_at(e, format!("unknown function `{other}`"))),
        }
    }
}

fn lambda(e: &Expr, arity: usize) -> Result<ScalarExpr, ParseError> {
    match &e.kind {
        Kind::Lambda(params, body) if params.len() == arity => scalar(body, params),
        Kind::Lambda(params, _) => Err(err_at(
            e,
            format!("expected a function of {arity} variable(s), found {}", params.len()),
        )),
        _ => Err(err_at(e, "expected a function such as `(x) -> x + 1`")),
    }
}

fn predicate(e: &Expr) -> Result<Predicate, ParseError> {
    match &e.kind {
        Kind::PredOp(c) => Ok(Predicate::Compare(*c)),
        Kind::Bool(true) => Ok(Predicate::Compare(Comparison::True)),
        Kind::Bool(false) => Ok(Predicate::Compare(Comparison::False)),
        // parameters are bound as (key, query)
        Kind::Lambda(params, body) if params.len() == 2 => {
            Ok(Predicate::Lambda(scalar(body, params)?))
        }
        _ => Err(err_at(
            e,
            "expected a predicate: one of == != < <= > >= true false, or (k, q) -> ...",
        )),
    }
}

fn scalar(e: &Expr, params: &[String]) -> Result<ScalarExpr, ParseError> {
    Ok(match &e.kind {
        Kind::Num(x) => ScalarExpr::lit(Value::num(*x)),
        Kind::Str(s) => ScalarExpr::lit(Value::str(s.clone())),
        Kind::Bool(b) => ScalarExpr::lit(*b),
        Kind::Ident(name) => match params.iter().position(|p| p == name) {
            Some(i) => ScalarExpr::var(i),
            None => return Err(err_at(e, format!("unbound variable `{name}` in function body"))),
        },
        Kind::Unary(op, inner) => ScalarExpr::unary(*op, scalar(inner, params)?),
        Kind::Binary(op, a, b) => ScalarExpr::binary(*op, scalar(a, params)?, scalar(b, params)?),
        Kind::If(c, t, f) => {
            ScalarExpr::cond(scalar(c, params)?, scalar(t, params)?, scalar(f, params)?)
        }
        _ => return Err(err_at(e, "only scalar expressions are allowed in a function body")),
    })
}

/// Parses source text into an unvalidated program.
pub(crate) fn parse_unvalidated(src: &str) -> Result<Program, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    let stmts = p.statements()?;
    let mut low = Lowering {
        b: ProgramBuilder::new(),
        env: HashMap::new(),
        length: None,
    };
    let mut output = None;
    let mut last = None;
    for stmt in stmts {
        match stmt {
            Stmt::Assign(name, e) => {
                if output.is_some() {
                    return Err(err_at(&e, "statement after `return`"));
                }
                let before = low.b.len();
                let v = low.lower(&e)?;
                let id = match v {
                    Sv::Node(id) => id,
                    other => low.sop(&e, other)?,
                };
                // only name nodes created by this statement; `y = x` is an alias
                let predefined = matches!(low.b.node(id).op, Op::Tokens | Op::Indices)
                    || Some(id) == low.length;
                if id.0 >= before && !predefined {
                    low.b.named(id, &name);
                }
                low.env.insert(name, id);
                last = Some(id);
            }
            Stmt::Return(e) => {
                if output.is_some() {
                    return Err(err_at(&e, "more than one `return`"));
                }
                let v = low.lower(&e)?;
                output = Some(low.sop(&e, v)?);
            }
        }
    }
    let (line, col) = p.here();
    let output = output
        .or(last)
        .ok_or_else(|| ParseError::new(line, col, "no return statement"))?;
    Ok(low.b.build(output))
}

/// Parses and validates a RASP program.
pub fn parse(src: &str) -> Result<Program, FrontendError> {
    let program = parse_unvalidated(src)?;
    validate(&program).map_err(FrontendError::Validation)
}
