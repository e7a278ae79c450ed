//! Closed-form coefficient expressions.
//!
//! Grammar (complex arithmetic throughout):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | '+' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'i' | 'x1' | 'x2' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func   := 'sin' | 'cos' | 'exp' | 're' | 'im' | 'sqrt'
//! ```
//!
//! `^` binds tighter than unary minus and is right associative, so `-x1^2`
//! is `-(x1^2)` and `2^3^2` is `2^9`.

use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Re,
    Im,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(Complex64),
    X1,
    X2,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression in `x1`, `x2`; keeps its source text. Two expressions
/// compare equal when their source text does.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expression(format!(
                "unexpected token {:?} in {source:?}",
                p.tokens[p.pos]
            )));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
        })
    }

    pub fn constant(v: Complex64) -> Self {
        Expr {
            source: format_complex(v),
            root: Node::Num(v),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, p: [f64; 2]) -> Complex64 {
        eval(&self.root, p)
    }

    /// True when the expression does not mention `x1` or `x2`.
    pub fn is_constant(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Num(_) => true,
                Node::X1 | Node::X2 => false,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                    walk(a) && walk(b)
                }
            }
        }
        walk(&self.root)
    }
}

fn format_complex(v: Complex64) -> String {
    if v.im == 0.0 {
        format!("{:?}", v.re)
    } else {
        format!("({:?}+{:?}*i)", v.re, v.im)
    }
}

fn eval(n: &Node, p: [f64; 2]) -> Complex64 {
    match n {
        Node::Num(v) => *v,
        Node::X1 => Complex64::new(p[0], 0.0),
        Node::X2 => Complex64::new(p[1], 0.0),
        Node::Neg(a) => -eval(a, p),
        Node::Add(a, b) => eval(a, p) + eval(b, p),
        Node::Sub(a, b) => eval(a, p) - eval(b, p),
        Node::Mul(a, b) => eval(a, p) * eval(b, p),
        Node::Div(a, b) => eval(a, p) / eval(b, p),
        Node::Pow(a, b) => pow(eval(a, p), eval(b, p)),
        Node::Call(f, a) => {
            let z = eval(a, p);
            match f {
                Func::Sin => z.sin(),
                Func::Cos => z.cos(),
                Func::Exp => z.exp(),
                Func::Re => Complex64::new(z.re, 0.0),
                Func::Im => Complex64::new(z.im, 0.0),
                Func::Sqrt => z.sqrt(),
            }
        }
    }
}

fn pow(base: Complex64, e: Complex64) -> Complex64 {
    if e.im == 0.0 && e.re.fract() == 0.0 && e.re.abs() <= 64.0 {
        return base.powi(e.re as i32);
    }
    if base.im == 0.0 && base.re >= 0.0 && e.im == 0.0 {
        return Complex64::new(base.re.powf(e.re), 0.0);
    }
    if base == Complex64::new(0.0, 0.0) {
        return if e.re > 0.0 {
            base
        } else {
            Complex64::new(f64::NAN, f64::NAN)
        };
    }
    base.powc(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k];
        if c.is_whitespace() {
            k += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_digit() || chars[k] == '.') {
                k += 1;
            }
            // Exponent part: e or E followed by optional sign and digits.
            if k < chars.len() && (chars[k] == 'e' || chars[k] == 'E') {
                let mut m = k + 1;
                if m < chars.len() && (chars[m] == '+' || chars[m] == '-') {
                    m += 1;
                }
                if m < chars.len() && chars[m].is_ascii_digit() {
                    while m < chars.len() && chars[m].is_ascii_digit() {
                        m += 1;
                    }
                    k = m;
                }
            }
            let text: String = chars[start..k].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number {text:?}")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_') {
                k += 1;
            }
            out.push(Tok::Ident(chars[start..k].iter().collect()));
        } else {
            let t = match c {
                '+' | '*' | '/' | '^' => Tok::Op(c),
                '-' | '\u{2212}' => Tok::Op('-'),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => return Err(Error::Expression(format!("unexpected character {c:?} in {s:?}"))),
            };
            out.push(t);
            k += 1;
        }
    }
    if out.is_empty() {
        return Err(Error::Expression("empty expression".into()));
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Tok::Op(c)) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op(&['+']).is_some() {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            let e = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(e)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self
            .peek()
            .cloned()
            .ok_or_else(|| Error::Expression("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(Complex64::new(v, 0.0))),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => match name.as_str() {
                "i" => Ok(Node::Num(Complex64::new(0.0, 1.0))),
                "x1" => Ok(Node::X1),
                "x2" => Ok(Node::X2),
                "pi" => Ok(Node::Num(Complex64::new(std::f64::consts::PI, 0.0))),
                other => {
                    let f = match other {
                        "sin" => Func::Sin,
                        "cos" => Func::Cos,
                        "exp" => Func::Exp,
                        "re" => Func::Re,
                        "im" => Func::Im,
                        "sqrt" => Func::Sqrt,
                        _ => return Err(Error::Expression(format!("unknown identifier {other:?}"))),
                    };
                    match self.peek() {
                        Some(Tok::LParen) => self.pos += 1,
                        _ => return Err(Error::Expression(format!("{other} needs parentheses"))),
                    }
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    Ok(Node::Call(f, Box::new(arg)))
                }
            },
            other => Err(Error::Expression(format!("unexpected token {other:?}"))),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::Expression("missing ')'".into())),
        }
    }
}
