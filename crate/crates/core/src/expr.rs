//! Small arithmetic expression grammar for coefficient functions in config
//! files: + - * /, ^ powers, exp, sin, cos, abs, min, max, numeric literals,
//! and the variables x1..xN, t, u, p1..pN, d1..dk, g1..gl (availability
//! depends on which field is being parsed).

use crate::error::{Result, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarRef {
    X(usize),
    T,
    U,
    P(usize),
    D(usize),
    G(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Exp,
    Sin,
    Cos,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
}

#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Var(VarRef),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call1(Func1, Box<Expr>),
    Call2(Func2, Box<Expr>, Box<Expr>),
}

/// Which variables an expression may reference, with their counts.
#[derive(Debug, Clone, Copy)]
pub struct VarContext {
    pub n_x: usize,
    pub allow_t: bool,
    pub allow_u: bool,
    pub n_p: usize,
    pub n_d: usize,
    pub n_g: usize,
}

impl VarContext {
    pub fn space_time(n_x: usize) -> Self {
        VarContext {
            n_x,
            allow_t: true,
            allow_u: false,
            n_p: 0,
            n_d: 0,
            n_g: 0,
        }
    }

    pub fn terminal(n_x: usize) -> Self {
        VarContext {
            n_x,
            allow_t: false,
            allow_u: false,
            n_p: 0,
            n_d: 0,
            n_g: 0,
        }
    }

    pub fn hamiltonian(n_x: usize) -> Self {
        VarContext {
            n_x,
            allow_t: true,
            allow_u: true,
            n_p: n_x,
            n_d: 0,
            n_g: 0,
        }
    }

    pub fn isaacs_coeff(n_x: usize, n_d: usize, n_g: usize) -> Self {
        VarContext {
            n_x,
            allow_t: true,
            allow_u: false,
            n_p: 0,
            n_d,
            n_g,
        }
    }
}

/// Values bound to variables during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalEnv<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub u: f64,
    pub p: &'a [f64],
    pub d: &'a [f64],
    pub g: &'a [f64],
}

impl Expr {
    pub fn eval(&self, env: &EvalEnv) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(VarRef::X(i)) => env.x[*i],
            Expr::Var(VarRef::T) => env.t,
            Expr::Var(VarRef::U) => env.u,
            Expr::Var(VarRef::P(i)) => env.p[*i],
            Expr::Var(VarRef::D(i)) => env.d[*i],
            Expr::Var(VarRef::G(i)) => env.g[*i],
            Expr::Neg(e) => -e.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Div(a, b) => a.eval(env) / b.eval(env),
            Expr::Pow(a, b) => a.eval(env).powf(b.eval(env)),
            Expr::Call1(f, e) => {
                let v = e.eval(env);
                match f {
                    Func1::Exp => v.exp(),
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                    Func1::Abs => v.abs(),
                }
            }
            Expr::Call2(f, a, b) => {
                let (va, vb) = (a.eval(env), b.eval(env));
                match f {
                    Func2::Min => va.min(vb),
                    Func2::Max => va.max(vb),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

fn perr(column: usize, message: impl Into<String>) -> SolverError {
    SolverError::Parse {
        line: 0,
        column: column + 1,
        message: message.into(),
    }
}

impl<'a> Lexer<'a> {
    fn tokenize(src: &'a str) -> Result<Vec<(Tok, usize)>> {
        let mut lex = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        while lex.pos < lex.src.len() {
            let c = lex.src[lex.pos];
            let start = lex.pos;
            match c {
                b' ' | b'\t' => {
                    lex.pos += 1;
                    continue;
                }
                b'+' => out.push((Tok::Plus, start)),
                b'-' => out.push((Tok::Minus, start)),
                b'*' => out.push((Tok::Star, start)),
                b'/' => out.push((Tok::Slash, start)),
                b'^' => out.push((Tok::Caret, start)),
                b'(' => out.push((Tok::LParen, start)),
                b')' => out.push((Tok::RParen, start)),
                b',' => out.push((Tok::Comma, start)),
                b'0'..=b'9' | b'.' => {
                    let mut end = lex.pos;
                    while end < lex.src.len()
                        && (lex.src[end].is_ascii_digit() || lex.src[end] == b'.')
                    {
                        end += 1;
                    }
                    if end < lex.src.len() && (lex.src[end] == b'e' || lex.src[end] == b'E') {
                        let mut e = end + 1;
                        if e < lex.src.len() && (lex.src[e] == b'+' || lex.src[e] == b'-') {
                            e += 1;
                        }
                        if e < lex.src.len() && lex.src[e].is_ascii_digit() {
                            end = e;
                            while end < lex.src.len() && lex.src[end].is_ascii_digit() {
                                end += 1;
                            }
                        }
                    }
                    let text = std::str::from_utf8(&lex.src[lex.pos..end]).unwrap();
                    let v: f64 = text
                        .parse()
                        .map_err(|_| perr(start, format!("bad number literal '{text}'")))?;
                    out.push((Tok::Num(v), start));
                    lex.pos = end;
                    continue;
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let mut end = lex.pos;
                    while end < lex.src.len()
                        && (lex.src[end].is_ascii_alphanumeric() || lex.src[end] == b'_')
                    {
                        end += 1;
                    }
                    let text = std::str::from_utf8(&lex.src[lex.pos..end]).unwrap();
                    out.push((Tok::Ident(text.to_string()), start));
                    lex.pos = end;
                    continue;
                }
                other => {
                    return Err(perr(
                        start,
                        format!("unexpected character '{}'", other as char),
                    ))
                }
            }
            lex.pos += 1;
        }
        Ok(out)
    }
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    ctx: VarContext,
    src_len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.src_len)
    }

    fn next(&mut self) -> Option<&(Tok, usize)> {
        let t = self.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        let col = self.col();
        match self.next() {
            Some((t, _)) if *t == tok => Ok(()),
            _ => Err(perr(col, format!("expected {what}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // right-associative power binds tighter than unary minus on its left
    fn factor(&mut self) -> Result<Expr> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.primary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.factor()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let col = self.col();
        match self.next().cloned() {
            Some((Tok::Num(v), _)) => Ok(Expr::Num(v)),
            Some((Tok::LParen, _)) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "closing ')'")?;
                Ok(e)
            }
            Some((Tok::Ident(name), _)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.pos += 1;
                    self.call(&name, col)
                } else {
                    self.variable(&name, col)
                }
            }
            _ => Err(perr(col, "expected a number, variable, or '('")),
        }
    }

    fn call(&mut self, name: &str, col: usize) -> Result<Expr> {
        let one = |f: Func1, p: &mut Self| -> Result<Expr> {
            let a = p.expr()?;
            p.expect(Tok::RParen, "closing ')'")?;
            Ok(Expr::Call1(f, Box::new(a)))
        };
        let two = |f: Func2, p: &mut Self| -> Result<Expr> {
            let a = p.expr()?;
            p.expect(Tok::Comma, "',' between arguments")?;
            let b = p.expr()?;
            p.expect(Tok::RParen, "closing ')'")?;
            Ok(Expr::Call2(f, Box::new(a), Box::new(b)))
        };
        match name {
            "exp" => one(Func1::Exp, self),
            "sin" => one(Func1::Sin, self),
            "cos" => one(Func1::Cos, self),
            "abs" => one(Func1::Abs, self),
            "min" => two(Func2::Min, self),
            "max" => two(Func2::Max, self),
            other => Err(perr(col, format!("unknown function '{other}'"))),
        }
    }

    fn variable(&mut self, name: &str, col: usize) -> Result<Expr> {
        let indexed = |prefix: &str, count: usize, name: &str| -> Option<Result<usize>> {
            let rest = name.strip_prefix(prefix)?;
            let idx: usize = rest.parse().ok()?;
            Some(if idx >= 1 && idx <= count {
                Ok(idx - 1)
            } else {
                Err(perr(
                    col,
                    format!("variable '{name}' out of range (declared count {count})"),
                ))
            })
        };
        match name {
            "t" if self.ctx.allow_t => return Ok(Expr::Var(VarRef::T)),
            "u" if self.ctx.allow_u => return Ok(Expr::Var(VarRef::U)),
            _ => {}
        }
        if let Some(r) = indexed("x", self.ctx.n_x, name) {
            return r.map(|i| Expr::Var(VarRef::X(i)));
        }
        if self.ctx.n_p > 0 {
            if let Some(r) = indexed("p", self.ctx.n_p, name) {
                return r.map(|i| Expr::Var(VarRef::P(i)));
            }
        }
        if self.ctx.n_d > 0 {
            if let Some(r) = indexed("d", self.ctx.n_d, name) {
                return r.map(|i| Expr::Var(VarRef::D(i)));
            }
        }
        if self.ctx.n_g > 0 {
            if let Some(r) = indexed("g", self.ctx.n_g, name) {
                return r.map(|i| Expr::Var(VarRef::G(i)));
            }
        }
        Err(perr(
            col,
            format!("unknown variable '{name}' in this context"),
        ))
    }
}

/// Parse an expression; errors carry the 1-based column within `src`.
pub fn parse_expr(src: &str, ctx: VarContext) -> Result<Expr> {
    let toks = Lexer::tokenize(src)?;
    if toks.is_empty() {
        return Err(perr(0, "empty expression"));
    }
    let mut parser = Parser {
        toks: &toks,
        pos: 0,
        ctx,
        src_len: src.len(),
    };
    let e = parser.expr()?;
    if parser.pos != toks.len() {
        return Err(perr(parser.col(), "trailing input after expression"));
    }
    Ok(e)
}
