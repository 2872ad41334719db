use super::{Expr, Func, Node, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(text: &'a str) -> Result<Vec<(usize, Tok)>> {
        let mut lx = Lexer { src: text.as_bytes(), pos: 0 };
        let mut out = Vec::new();
        while let Some(tok) = lx.next()? {
            out.push(tok);
        }
        Ok(out)
    }

    fn next(&mut self) -> Result<Option<(usize, Tok)>> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok(None);
        };
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start).map(Some);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self
                .src
                .get(self.pos)
                .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_')
            {
                self.pos += 1;
            }
            let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
            return Ok(Some((start, Tok::Ident(s))));
        }
        if b"+-*/^()".contains(&c) {
            self.pos += 1;
            return Ok(Some((start, Tok::Op(c as char))));
        }
        Err(Error::Syntax { pos: start, msg: format!("unexpected character `{}`", c as char) })
    }

    fn number(&mut self, start: usize) -> Result<(usize, Tok)> {
        let digits = |lx: &mut Self| {
            let s = lx.pos;
            while lx.src.get(lx.pos).is_some_and(u8::is_ascii_digit) {
                lx.pos += 1;
            }
            lx.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            return Err(Error::Syntax { pos: start, msg: "malformed number".into() });
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
            }
        }
        let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        s.parse::<f64>()
            .map(|v| (start, Tok::Num(v)))
            .map_err(|_| Error::Syntax { pos: start, msg: format!("malformed number `{s}`") })
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    i: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |(p, _)| *p)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn next_is_pow(&self) -> bool {
        matches!(self.toks.get(self.i + 1), Some((_, Tok::Op('^'))))
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(Error::Syntax { pos: self.pos(), msg: format!("expected `{op}`") })
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::new(Node::Add(lhs, self.term()?));
            } else if self.eat('-') {
                lhs = Expr::new(Node::Sub(lhs, self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::new(Node::Mul(lhs, self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::new(Node::Div(lhs, self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            // `-2^2` still means -(2^2).
            if let (Some(Tok::Num(v)), false) = (self.peek().cloned(), self.next_is_pow()) {
                self.i += 1;
                return Ok(Expr::constant(-v));
            }
            return Ok(Expr::new(Node::Neg(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        self.power_suffix(base)
    }

    fn power_suffix(&mut self, base: Expr) -> Result<Expr> {
        if !self.eat('^') {
            return Ok(base);
        }
        let paren = self.eat('(');
        let neg = self.eat('-');
        let pos = self.pos();
        let k = match self.peek().cloned() {
            Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                self.i += 1;
                v as i32
            }
            _ => {
                return Err(Error::Syntax { pos, msg: "exponent must be an integer literal".into() })
            }
        };
        if paren {
            self.expect(')')?;
        }
        Ok(Expr::new(Node::Pow(base, if neg { -k } else { k })))
    }

    fn primary(&mut self) -> Result<Expr> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.i += 1;
                Ok(Expr::constant(v))
            }
            Some(Tok::Op('(')) => {
                self.i += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.i += 1;
                if let Some(func) = function(&name) {
                    self.expect('(')?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::call(func, arg));
                }
                variable(&name).ok_or(Error::UnknownIdentifier { pos, name })
            }
            Some(Tok::Op(c)) => Err(Error::Syntax { pos, msg: format!("unexpected `{c}`") }),
            None => Err(Error::Syntax { pos, msg: "unexpected end of input".into() }),
        }
    }
}

fn function(name: &str) -> Option<Func> {
    Some(match name {
        "exp" => Func::Exp,
        "log" => Func::Log,
        "sin" => Func::Sin,
        "cos" => Func::Cos,
        "sqrt" => Func::Sqrt,
        "phi" => Func::Phi(0),
        _ => {
            let k: u8 = name.strip_prefix("dphi")?.parse().ok()?;
            Func::Phi(k)
        }
    })
}

fn variable(name: &str) -> Option<Expr> {
    match name {
        "t" => Some(Expr::var(Var::T)),
        "pi" => Some(Expr::constant(std::f64::consts::PI)),
        _ => {
            let d = name.strip_prefix('x')?;
            match d.parse::<u8>() {
                Ok(i) if (1..=9).contains(&i) && d.len() == 1 => Some(Expr::var(Var::X(i))),
                _ => None,
            }
        }
    }
}

/// Parses an expression in the toolkit's grammar.
pub fn parse(text: &str) -> Result<Expr> {
    let toks = Lexer::tokens(text)?;
    let mut p = Parser { toks, i: 0, end: text.len() };
    let e = p.expr()?;
    if p.i != p.toks.len() {
        return Err(Error::Syntax { pos: p.pos(), msg: "trailing input".into() });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_simple_expression() {
        let e = parse("x1*x1 + sin(t)").unwrap();
        assert_eq!(e.eval(0.0, &[2.0]), 4.0);
    }

    #[test]
    fn phi_at_removable_singularity() {
        assert_eq!(parse("phi(0)").unwrap().eval(0.0, &[]), 1.0);
    }

    #[test]
    fn rate_expression_is_finite_at_its_singularity() {
        let e = parse("0.01*(10-x1)/(exp((10-x1)/10)-1)").unwrap();
        assert!(e.eval(0.0, &[10.0]).is_nan());
        let e = parse("0.1*phi((10-x1)/10)").unwrap();
        let v = e.eval(0.0, &[10.0]);
        assert!((v - 0.1).abs() < 1e-15);
        // Hand expansion: 0.1 * (1 - u/2) with u = (10 - x1) / 10.
        let near = e.eval(0.0, &[10.0 - 1e-6]);
        assert!((near - 0.1 * (1.0 - 0.5e-7)).abs() < 1e-15);
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(parse("2+3*4").unwrap().eval(0.0, &[]), 14.0);
        assert_eq!(parse("-2^2").unwrap().eval(0.0, &[]), -4.0);
        assert_eq!(parse("(-2)^2").unwrap().eval(0.0, &[]), 4.0);
        assert_eq!(parse("2^-1").unwrap().eval(0.0, &[]), 0.5);
        assert_eq!(parse("8/2/2").unwrap().eval(0.0, &[]), 2.0);
        assert_eq!(parse("1-2-3").unwrap().eval(0.0, &[]), -4.0);
        assert_eq!(parse("2*-x1").unwrap().eval(0.0, &[3.0]), -6.0);
        assert!((parse("pi").unwrap().eval(0.0, &[]) - std::f64::consts::PI).abs() == 0.0);
        assert_eq!(parse("1.5e2").unwrap().eval(0.0, &[]), 150.0);
    }

    #[test]
    fn errors_carry_positions() {
        match parse("x1 + y") {
            Err(Error::UnknownIdentifier { pos, name }) => {
                assert_eq!(pos, 5);
                assert_eq!(name, "y");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("x1 +"), Err(Error::Syntax { pos: 4, .. })));
        assert!(matches!(parse("x1 ^ 1.5"), Err(Error::Syntax { .. })));
        assert!(matches!(parse("x10"), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(parse("(x1"), Err(Error::Syntax { .. })));
        assert!(matches!(parse("x1 $"), Err(Error::Syntax { pos: 3, .. })));
        assert!(matches!(parse("x1 x2"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn derivative_kernels_parse() {
        let e = parse("dphi2(x1)").unwrap();
        assert_eq!(e.to_string(), "dphi2(x1)");
    }
}
