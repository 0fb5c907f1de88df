//! Scalar arithmetic expressions over named real variables.
//!
//! The grammar is deliberately small so that every expression stays
//! semialgebraic: constants, variables, `+ - * /`, integer powers and `sqrt`.
//!
//! ```text
//! expr     := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := atom ('^' exponent)*
//! exponent := '-'? INTEGER | '(' '-'? INTEGER ')'
//! atom     := NUMBER | IDENT | 'sqrt' '(' expr ')' | '(' expr ')'
//! ```
//!
//! Identifiers match `[a-z][a-z0-9]*`; `sqrt` is reserved.

use std::fmt;
use std::str::FromStr;

use smallvec::{smallvec, SmallVec};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown character {ch:?} at byte {offset}")]
    UnknownCharacter { offset: usize, ch: char },
    #[error("integer exponent out of range at byte {offset}")]
    ExponentOverflow { offset: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("expected {expected} coordinates, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("not differentiable: {0}")]
    NotDifferentiable(&'static str),
}

/// Expression tree. Variables refer to positions in the owning
/// [`Expression`]'s variable list. Constants are finite and non-negative;
/// negation is always an explicit [`Node::Neg`].
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Sqrt(Box<Node>),
}

impl Node {
    fn precedence(&self) -> u8 {
        match self {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Neg(..) => 3,
            Node::Pow(..) => 4,
            Node::Const(_) | Node::Var(_) | Node::Sqrt(_) => 5,
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Const(_) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Pow(a, _) | Node::Sqrt(a) => a.max_var(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }
}

type Grad = SmallVec<[f64; 6]>;

/// A parsed expression together with its ordered free-variable list.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    variables: Vec<String>,
}

impl Expression {
    /// Parses `text`; variables are ordered by first appearance.
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let mut parser = Parser::new(text, None)?;
        let root = parser.parse_all()?;
        Ok(Expression {
            root,
            variables: parser.variables,
        })
    }

    /// Parses `text` against a fixed variable ordering. Names outside
    /// `variables` are rejected.
    pub fn parse_with_vars<S: AsRef<str>>(text: &str, variables: &[S]) -> Result<Self, ExprError> {
        let vars: Vec<String> = variables.iter().map(|s| s.as_ref().to_string()).collect();
        let mut parser = Parser::new(text, Some(vars))?;
        let root = parser.parse_all()?;
        Ok(Expression {
            root,
            variables: parser.variables,
        })
    }

    /// Builds an expression from a tree. Every `Var` index must be a valid
    /// position in `variables`.
    pub fn from_node(root: Node, variables: Vec<String>) -> Result<Self, ExprError> {
        if let Some(i) = root.max_var() {
            if i >= variables.len() {
                return Err(ExprError::UnknownVariable(format!("#{i}")));
            }
        }
        Ok(Expression { root, variables })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn arity(&self) -> usize {
        self.variables.len()
    }

    fn check_arity(&self, point: &[f64]) -> Result<(), ExprError> {
        if point.len() != self.variables.len() {
            return Err(ExprError::Arity {
                expected: self.variables.len(),
                got: point.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        self.check_arity(point)?;
        eval_node(&self.root, point)
    }

    /// Exact forward-mode gradient with respect to the variable list.
    pub fn gradient(&self, point: &[f64]) -> Result<Vec<f64>, ExprError> {
        Ok(self.value_and_gradient(point)?.1)
    }

    pub fn value_and_gradient(&self, point: &[f64]) -> Result<(f64, Vec<f64>), ExprError> {
        self.check_arity(point)?;
        let (v, g) = dual_node(&self.root, point)?;
        Ok((v, g.into_vec()))
    }
}

impl FromStr for Expression {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.variables, 0)
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, vars: &[String], min_prec: u8) -> fmt::Result {
    let wrap = node.precedence() < min_prec;
    if wrap {
        f.write_str("(")?;
    }
    match node {
        Node::Const(c) => write!(f, "{c}")?,
        Node::Var(i) => f.write_str(&vars[*i])?,
        Node::Neg(a) => {
            f.write_str("-")?;
            write_node(f, a, vars, 3)?;
        }
        Node::Add(a, b) | Node::Sub(a, b) => {
            write_node(f, a, vars, 1)?;
            f.write_str(if matches!(node, Node::Add(..)) { " + " } else { " - " })?;
            write_node(f, b, vars, 2)?;
        }
        Node::Mul(a, b) | Node::Div(a, b) => {
            write_node(f, a, vars, 2)?;
            f.write_str(if matches!(node, Node::Mul(..)) { "*" } else { "/" })?;
            write_node(f, b, vars, 3)?;
        }
        Node::Pow(a, n) => {
            write_node(f, a, vars, 4)?;
            write!(f, "^{n}")?;
        }
        Node::Sqrt(a) => {
            f.write_str("sqrt(")?;
            write_node(f, a, vars, 0)?;
            f.write_str(")")?;
        }
    }
    if wrap {
        f.write_str(")")?;
    }
    Ok(())
}

fn eval_node(node: &Node, p: &[f64]) -> Result<f64, ExprError> {
    Ok(match node {
        Node::Const(c) => *c,
        Node::Var(i) => p[*i],
        Node::Neg(a) => -eval_node(a, p)?,
        Node::Add(a, b) => eval_node(a, p)? + eval_node(b, p)?,
        Node::Sub(a, b) => eval_node(a, p)? - eval_node(b, p)?,
        Node::Mul(a, b) => eval_node(a, p)? * eval_node(b, p)?,
        Node::Div(a, b) => {
            let num = eval_node(a, p)?;
            let den = eval_node(b, p)?;
            if den == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            num / den
        }
        Node::Pow(a, n) => {
            let base = eval_node(a, p)?;
            if *n < 0 && base == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            base.powi(*n)
        }
        Node::Sqrt(a) => {
            let v = eval_node(a, p)?;
            if v < 0.0 {
                return Err(ExprError::Domain("square root of a negative number"));
            }
            v.sqrt()
        }
    })
}

fn dual_node(node: &Node, p: &[f64]) -> Result<(f64, Grad), ExprError> {
    let n = p.len();
    Ok(match node {
        Node::Const(c) => (*c, smallvec![0.0; n]),
        Node::Var(i) => {
            let mut g: Grad = smallvec![0.0; n];
            g[*i] = 1.0;
            (p[*i], g)
        }
        Node::Neg(a) => {
            let (v, mut g) = dual_node(a, p)?;
            g.iter_mut().for_each(|d| *d = -*d);
            (-v, g)
        }
        Node::Add(a, b) | Node::Sub(a, b) => {
            let (va, mut ga) = dual_node(a, p)?;
            let (vb, gb) = dual_node(b, p)?;
            let sign = if matches!(node, Node::Add(..)) { 1.0 } else { -1.0 };
            for (x, y) in ga.iter_mut().zip(gb.iter()) {
                *x += sign * y;
            }
            (va + sign * vb, ga)
        }
        Node::Mul(a, b) => {
            let (va, mut ga) = dual_node(a, p)?;
            let (vb, gb) = dual_node(b, p)?;
            for (x, y) in ga.iter_mut().zip(gb.iter()) {
                *x = *x * vb + va * y;
            }
            (va * vb, ga)
        }
        Node::Div(a, b) => {
            let (va, mut ga) = dual_node(a, p)?;
            let (vb, gb) = dual_node(b, p)?;
            if vb == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            let inv = 1.0 / vb;
            for (x, y) in ga.iter_mut().zip(gb.iter()) {
                *x = (*x - va * inv * y) * inv;
            }
            (va * inv, ga)
        }
        Node::Pow(a, k) => {
            let (va, mut ga) = dual_node(a, p)?;
            if *k == 0 {
                return Ok((1.0, smallvec![0.0; n]));
            }
            if *k < 0 && va == 0.0 {
                return Err(ExprError::Domain("division by zero"));
            }
            let scale = f64::from(*k) * va.powi(*k - 1);
            ga.iter_mut().for_each(|d| *d *= scale);
            (va.powi(*k), ga)
        }
        Node::Sqrt(a) => {
            let (va, mut ga) = dual_node(a, p)?;
            if va < 0.0 {
                return Err(ExprError::Domain("square root of a negative number"));
            }
            if va == 0.0 {
                return Err(ExprError::NotDifferentiable("sqrt at 0"));
            }
            let s = va.sqrt();
            let scale = 0.5 / s;
            ga.iter_mut().for_each(|d| *d *= scale);
            (s, ga)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    /// Integer-form literal; `None` when it does not fit in an `i64`.
    Int(Option<i64>, f64),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    variables: Vec<String>,
    fixed: bool,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Tok::Plus, start)),
            b'-' => out.push((Tok::Minus, start)),
            b'*' => out.push((Tok::Star, start)),
            b'/' => out.push((Tok::Slash, start)),
            b'^' => out.push((Tok::Caret, start)),
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut is_int = true;
                if i < bytes.len() && bytes[i] == b'.' {
                    is_int = false;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let lit = &text[start..i];
                if lit == "." {
                    return Err(ExprError::Syntax {
                        offset: start,
                        message: "lone decimal point".into(),
                    });
                }
                let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("bad number literal {lit:?}"),
                })?;
                if !value.is_finite() {
                    return Err(ExprError::Syntax {
                        offset: start,
                        message: "number literal out of range".into(),
                    });
                }
                // Integer literals are kept exact so they can serve as exponents.
                let tok = if is_int {
                    Tok::Int(lit.parse::<i64>().ok(), value)
                } else {
                    Tok::Num(value)
                };
                out.push((tok, start));
                continue;
            }
            b'a'..=b'z' => {
                while i < bytes.len() && (bytes[i].is_ascii_lowercase() || bytes[i].is_ascii_digit()) {
                    i += 1;
                }
                out.push((Tok::Ident(text[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ExprError::UnknownCharacter { offset: start, ch });
            }
        }
        i += 1;
    }
    Ok(out)
}

impl Parser {
    fn new(text: &str, fixed: Option<Vec<String>>) -> Result<Self, ExprError> {
        let toks = lex(text)?;
        Ok(Parser {
            toks,
            pos: 0,
            end: text.len(),
            fixed: fixed.is_some(),
            variables: fixed.unwrap_or_default(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn parse_all(&mut self) -> Result<Node, ExprError> {
        if self.toks.is_empty() {
            return self.error("empty expression");
        }
        let node = self.expr()?;
        if self.pos != self.toks.len() {
            return self.error("unexpected trailing input");
        }
        Ok(node)
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let mut base = self.atom()?;
        while self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let exp = self.exponent()?;
            base = Node::Pow(Box::new(base), exp);
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ExprError> {
        let paren = self.peek() == Some(&Tok::LParen);
        if paren {
            self.pos += 1;
        }
        let negative = self.peek() == Some(&Tok::Minus);
        if negative {
            self.pos += 1;
        }
        let offset = self.offset();
        let value = match self.peek() {
            Some(Tok::Int(Some(v), _)) => *v,
            Some(Tok::Int(None, _)) => return Err(ExprError::ExponentOverflow { offset }),
            _ => return self.error("exponent must be an integer literal"),
        };
        self.pos += 1;
        let signed = if negative { -value } else { value };
        let exp = i32::try_from(signed).map_err(|_| ExprError::ExponentOverflow { offset })?;
        if paren {
            self.expect(Tok::RParen, "`)` after exponent")?;
        }
        Ok(exp)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Some(Tok::Int(_, v)) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if name == "sqrt" {
                    self.expect(Tok::LParen, "`(` after sqrt")?;
                    let inner = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Node::Sqrt(Box::new(inner)));
                }
                if let Some(i) = self.variables.iter().position(|v| *v == name) {
                    return Ok(Node::Var(i));
                }
                if self.fixed {
                    return Err(ExprError::UnknownVariable(name));
                }
                self.variables.push(name);
                Ok(Node::Var(self.variables.len() - 1))
            }
            Some(_) => self.error("expected a number, variable or `(`"),
            None => self.error("unexpected end of input"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(i: usize) -> Box<Node> {
        Box::new(Node::Var(i))
    }

    fn c(v: f64) -> Box<Node> {
        Box::new(Node::Const(v))
    }

    #[test]
    fn parses_circle_polynomial() {
        let e = Expression::parse("x^2 + y^2 - 1").unwrap();
        assert_eq!(e.variables(), ["x", "y"]);
        let expected = Node::Sub(
            Box::new(Node::Add(Box::new(Node::Pow(var(0), 2)), Box::new(Node::Pow(var(1), 2)))),
            c(1.0),
        );
        assert_eq!(e.root(), &expected);
    }

    #[test]
    fn single_variable() {
        let e = Expression::parse("x").unwrap();
        assert_eq!(e.root(), &Node::Var(0));
        assert_eq!(e.eval(&[3.5]).unwrap(), 3.5);
        assert_eq!(e.gradient(&[7.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn hat_cone_polynomial_precedence() {
        let e = Expression::parse("(x-1)^2 + y^2 - z^2").unwrap();
        assert_eq!(e.variables(), ["x", "y", "z"]);
        let shifted = Box::new(Node::Sub(var(0), c(1.0)));
        let expected = Node::Sub(
            Box::new(Node::Add(Box::new(Node::Pow(shifted, 2)), Box::new(Node::Pow(var(1), 2)))),
            Box::new(Node::Pow(var(2), 2)),
        );
        assert_eq!(e.root(), &expected);
        assert_eq!(e.eval(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // central differences at (2,1,1) give (2, 2, -2)
        assert_eq!(e.gradient(&[2.0, 1.0, 1.0]).unwrap(), vec![2.0, 2.0, -2.0]);
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let e = Expression::parse("-x^2").unwrap();
        assert_eq!(e.root(), &Node::Neg(Box::new(Node::Pow(var(0), 2))));
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
        let e = Expression::parse("2*-x").unwrap();
        assert_eq!(e.eval(&[3.0]).unwrap(), -6.0);
    }

    #[test]
    fn circle_eval_and_gradient() {
        let e = Expression::parse("x^2+y^2-1").unwrap();
        assert_eq!(e.eval(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(e.gradient(&[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn negative_and_parenthesized_exponents() {
        let e = Expression::parse("x^-2 + x^(-1) + x^(3)").unwrap();
        let v = e.eval(&[2.0]).unwrap();
        assert!((v - (0.25 + 0.5 + 8.0)).abs() < 1e-15);
        let g = e.gradient(&[2.0]).unwrap()[0];
        assert!((g - (-2.0 / 8.0 - 1.0 / 4.0 + 12.0)).abs() < 1e-14);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match Expression::parse("x + * y") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        match Expression::parse("x + Y") {
            Err(ExprError::UnknownCharacter { offset, ch }) => {
                assert_eq!((offset, ch), (4, 'Y'));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Expression::parse("(x"), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(Expression::parse(""), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expression::parse("x^1.5"), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn exponent_overflow() {
        assert!(matches!(
            Expression::parse("x^99999999999"),
            Err(ExprError::ExponentOverflow { offset: 2 })
        ));
        assert!(matches!(
            Expression::parse("x^123456789012345678901234567890"),
            Err(ExprError::ExponentOverflow { .. })
        ));
    }

    #[test]
    fn domain_errors() {
        let e = Expression::parse("sqrt(x)").unwrap();
        assert_eq!(e.eval(&[-1.0]), Err(ExprError::Domain("square root of a negative number")));
        assert_eq!(e.eval(&[0.0]).unwrap(), 0.0);
        assert!(matches!(e.gradient(&[0.0]), Err(ExprError::NotDifferentiable(_))));
        let e = Expression::parse("1/x").unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain(_))));
        let e = Expression::parse("x^-1").unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain(_))));
    }

    #[test]
    fn arity_is_checked() {
        let e = Expression::parse("x + y").unwrap();
        assert_eq!(e.eval(&[1.0]), Err(ExprError::Arity { expected: 2, got: 1 }));
    }

    #[test]
    fn fixed_variable_lists() {
        let e = Expression::parse_with_vars("y - 2*x", &["x", "y", "z"]).unwrap();
        assert_eq!(e.arity(), 3);
        assert_eq!(e.eval(&[1.0, 5.0, 9.0]).unwrap(), 3.0);
        assert_eq!(e.gradient(&[1.0, 5.0, 9.0]).unwrap(), vec![-2.0, 1.0, 0.0]);
        assert_eq!(
            Expression::parse_with_vars("w", &["x"]),
            Err(ExprError::UnknownVariable("w".into()))
        );
    }

    #[test]
    fn printing_is_minimal_and_reparses() {
        for text in [
            "x^2 + y^2 - 1",
            "(x - 1)^2 + y^2 - z^2",
            "-x^2",
            "(-x)^2",
            "x - (y - z)",
            "x/(y*z)",
            "x^2^3",
            "sqrt(x^2 + y^2)",
            "--x",
            "0.125*u",
        ] {
            let e = Expression::parse(text).unwrap();
            assert_eq!(e.to_string(), text);
        }
    }
}
