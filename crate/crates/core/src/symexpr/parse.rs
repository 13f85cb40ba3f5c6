use std::fmt;

use thiserror::Error;

use super::{Expr, Func, Node, Var};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    Syntax(String),
    UnknownIdentifier(String),
    VariableOutOfRange { name: String, limit: usize },
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Syntax(msg) => write!(f, "syntax error: {msg}"),
            ParseErrorKind::UnknownIdentifier(name) => write!(f, "unknown identifier `{name}`"),
            ParseErrorKind::VariableOutOfRange { name, limit } => {
                write!(f, "variable `{name}` out of range (declared {limit})")
            }
        }
    }
}

/// Parses `text` into an expression over `x1..x{n_state}` and
/// `r1..r{n_param}`. `pi` is accepted as a constant.
///
/// Precedence, tightest first: `^` (integer exponent), unary `-`, `* /`,
/// `+ -`. Binary operators associate to the left.
pub fn parse(text: &str, n_state: usize, n_param: usize) -> Result<Expr, ParseError> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
        n_state,
        n_param,
    };
    parser.skip_ws();
    if parser.at_end() {
        return Err(parser.syntax("empty expression"));
    }
    let e = parser.expr()?;
    parser.skip_ws();
    if !parser.at_end() {
        return Err(parser.syntax(format!("unexpected `{}`", parser.peek_char())));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n_state: usize,
    n_param: usize,
}

impl<'a> Parser<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek_char(&self) -> char {
        self.peek().map(char::from).unwrap_or('\0')
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn syntax(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.pos,
            kind: ParseErrorKind::Syntax(msg.into()),
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.syntax(format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Expr::raw(Node::Add(lhs, rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Expr::raw(Node::Sub(lhs, rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.unary()?;
                lhs = Expr::raw(Node::Mul(lhs, rhs));
            } else if self.eat(b'/') {
                let rhs = self.unary()?;
                lhs = Expr::raw(Node::Div(lhs, rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            return Ok(Expr::raw(Node::Neg(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let k = self.exponent()?;
            return Ok(Expr::raw(Node::Pow(base, k)));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        let paren = self.eat(b'(');
        let negative = self.eat(b'-');
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.syntax("expected integer exponent"));
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        let mut k: i32 = digits.parse().map_err(|_| ParseError {
            offset: start,
            kind: ParseErrorKind::Syntax("exponent too large".into()),
        })?;
        if negative {
            k = -k;
        }
        if paren {
            self.expect(b')')?;
        }
        Ok(k)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.syntax(format!("unexpected `{}`", self.peek_char()))),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while matches!(p.peek(), Some(c) if c.is_ascii_digit()) {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut count = digits(self);
        if self.peek() == Some(b'.') {
            self.pos += 1;
            count += digits(self);
        }
        if count == 0 {
            return Err(self.syntax("malformed number"));
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
                return Err(self.syntax("malformed exponent"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number");
        let v: f64 = text.parse().map_err(|_| ParseError {
            offset: start,
            kind: ParseErrorKind::Syntax(format!("malformed number `{text}`")),
        })?;
        Ok(Expr::raw(Node::Num(v)))
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
        if let Some(f) = Func::from_name(name) {
            self.expect(b'(')?;
            let arg = self.expr()?;
            self.expect(b')')?;
            return Ok(Expr::raw(Node::Call(f, arg)));
        }
        if name == "pi" {
            return Ok(Expr::raw(Node::Num(std::f64::consts::PI)));
        }
        let unknown = || ParseError {
            offset: start,
            kind: ParseErrorKind::UnknownIdentifier(name.to_string()),
        };
        let (kind, rest) = name.split_at(1);
        if rest.is_empty() || !rest.bytes().all(|c| c.is_ascii_digit()) || rest.starts_with('0') {
            return Err(unknown());
        }
        let index: usize = rest.parse().map_err(|_| unknown())?;
        let (var, limit) = match kind {
            "x" => (Var::State(index - 1), self.n_state),
            "r" => (Var::Param(index - 1), self.n_param),
            _ => return Err(unknown()),
        };
        if index > limit {
            return Err(ParseError {
                offset: start,
                kind: ParseErrorKind::VariableOutOfRange {
                    name: name.to_string(),
                    limit,
                },
            });
        }
        Ok(Expr::var(var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_carry_offsets() {
        let err = parse("x1 + * x2", 2, 0).unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(matches!(err.kind, ParseErrorKind::Syntax(_)));

        let err = parse("x1 + foo", 2, 0).unwrap_err();
        assert_eq!(err.offset, 5);
        assert_eq!(err.kind, ParseErrorKind::UnknownIdentifier("foo".into()));

        let err = parse("x4", 3, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::VariableOutOfRange { limit: 3, .. }));

        let err = parse("r1", 3, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::VariableOutOfRange { limit: 0, .. }));

        assert!(parse("   ", 1, 0).is_err());
        assert!(parse("x0", 1, 0).is_err());
        assert!(parse("(x1", 1, 0).is_err());
        assert!(parse("x1^x1", 1, 0).is_err());
        assert!(parse("sin x1", 1, 0).is_err());
    }

    #[test]
    fn numbers_and_constants() {
        let e = parse("1.5e-3 + pi", 0, 0).unwrap();
        let v = e.eval(&super::super::Env::default()).unwrap();
        assert!((v - (1.5e-3 + std::f64::consts::PI)).abs() < 1e-15);
        let e = parse("x1^-2", 1, 0).unwrap();
        assert_eq!(e, Expr::raw(Node::Pow(Expr::state(0), -2)));
        let e = parse("x1^(-2)", 1, 0).unwrap();
        assert_eq!(e, Expr::raw(Node::Pow(Expr::state(0), -2)));
    }
}
