//! Arithmetic over the terminal Brownian value `B_T`.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'B_T' | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func   := 'min' | 'max' | 'exp' | 'abs'
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expression error at byte {position}: {message}")]
pub struct ExprError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Min,
    Max,
    Exp,
    Abs,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Brownian,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed claim expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self {
            source: source.to_string(),
            root,
        })
    }

    /// Value at terminal Brownian level `b`.
    pub fn eval(&self, b: f64) -> f64 {
        eval(&self.root, b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn eval(node: &Node, b: f64) -> f64 {
    match node {
        Node::Const(c) => *c,
        Node::Brownian => b,
        Node::Neg(a) => -eval(a, b),
        Node::Add(x, y) => eval(x, b) + eval(y, b),
        Node::Sub(x, y) => eval(x, b) - eval(y, b),
        Node::Mul(x, y) => eval(x, b) * eval(y, b),
        Node::Div(x, y) => eval(x, b) / eval(y, b),
        Node::Pow(x, y) => eval(x, b).powf(eval(y, b)),
        Node::Call(f, args) => {
            let mut vals = args.iter().map(|a| eval(a, b));
            match f {
                Func::Min => vals.fold(f64::INFINITY, f64::min),
                Func::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                Func::Exp => vals.next().unwrap_or(f64::NAN).exp(),
                Func::Abs => vals.next().unwrap_or(f64::NAN).abs(),
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> ExprError {
        ExprError {
            position: self.pos,
            message: message.into(),
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.name(),
            Some(c) => Err(self.error(format!("unexpected character '{}'", c as char))),
            None => Err(self.error("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let mut ahead = self.pos + 1;
            if ahead < self.src.len() && matches!(self.src[ahead], b'+' | b'-') {
                ahead += 1;
            }
            if ahead < self.src.len() && self.src[ahead].is_ascii_digit() {
                self.pos = ahead;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        text.parse::<f64>().map(Node::Const).map_err(|_| ExprError {
            position: start,
            message: format!("invalid number '{text}'"),
        })
    }

    fn name(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii name");
        let func = match name {
            "B_T" => return Ok(Node::Brownian),
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            _ => {
                return Err(ExprError {
                    position: start,
                    message: format!("unknown name '{name}'"),
                })
            }
        };
        if !self.eat(b'(') {
            return Err(self.error(format!("expected '(' after {name}")));
        }
        let mut args = vec![self.expr()?];
        while self.eat(b',') {
            args.push(self.expr()?);
        }
        if !self.eat(b')') {
            return Err(self.error("expected ')' or ','"));
        }
        let arity_ok = match func {
            Func::Exp | Func::Abs => args.len() == 1,
            Func::Min | Func::Max => args.len() >= 2,
        };
        if !arity_ok {
            return Err(ExprError {
                position: start,
                message: format!("wrong number of arguments to {name}"),
            });
        }
        Ok(Node::Call(func, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(src: &str, b: f64) -> f64 {
        Expr::parse(src).unwrap().eval(b)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(at("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(at("(1 + 2) * 3", 0.0), 9.0);
        assert_eq!(at("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(at("2 ^ 3 ^ 2", 0.0), 512.0);
        assert_eq!(at("-2 ^ 2", 0.0), -4.0);
        assert_eq!(at("1 - 2 - 3", 0.0), -4.0);
        assert_eq!(at("1/2", 0.0), 0.5);
    }

    #[test]
    fn brownian_and_functions() {
        assert_eq!(at("-B_T", 0.5), -0.5);
        assert_eq!(at("-B_T/2", 0.5), -0.25);
        assert_eq!(at("max(B_T - 1, 0)", 1.5), 0.5);
        assert_eq!(at("min(B_T, 0.2, -1)", 3.0), -1.0);
        assert_eq!(at("abs(B_T) + exp(0)", -2.0), 3.0);
        assert_eq!(at("1.5e-1 * B_T", 2.0), 0.3);
    }

    #[test]
    fn errors_carry_positions() {
        let e = Expr::parse("1 + foo").unwrap_err();
        assert_eq!(e.position, 4);
        assert!(Expr::parse("max(1)").is_err());
        assert!(Expr::parse("(1 + 2").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("B_t").is_err());
    }
}
