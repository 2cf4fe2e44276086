//! Text form of expression trees: infix arithmetic plus operator calls,
//! e.g. `(close-open)/(high-low)` or `TS-Mean(volume,5)`.

use std::sync::Arc;

use thiserror::Error;

use crate::program::{ArityClass, ExprTree, Operator};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("expression error at byte {pos}: {message}")]
pub struct ExprError {
    pub pos: usize,
    pub message: String,
}

pub fn parse_expr(text: &str) -> Result<Arc<ExprTree>, ExprError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let tree = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(tree)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> ExprError {
        ExprError { pos: self.pos, message: message.into() }
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

    fn expr(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => Operator::Add,
                Some(b'-') => Operator::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = ExprTree::node(op, vec![lhs, rhs]);
        }
    }

    fn term(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => Operator::Mul,
                Some(b'/') => Operator::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = ExprTree::node(op, vec![lhs, rhs]);
        }
    }

    fn unary(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            if let ExprTree::Scalar(s) = inner.as_ref() {
                return Ok(ExprTree::scalar(-s.value()));
            }
            return Ok(ExprTree::node(Operator::Sub, vec![ExprTree::scalar(0.0), inner]));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(),
            Some(c) => Err(self.error(format!("unexpected `{}`", c as char))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign = (c == b'-' || c == b'+')
                && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(ExprTree::scalar)
            .map_err(|_| ExprError { pos: start, message: format!("bad number `{text}`") })
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        let word = |p: &Self| p.pos < p.src.len() && (p.src[p.pos].is_ascii_alphanumeric() || p.src[p.pos] == b'_');
        while word(self) {
            self.pos += 1;
        }
        // hyphenated operator names such as TS-Mean or CS-Rank
        let head = &self.src[start..self.pos];
        if (head.eq_ignore_ascii_case(b"ts") || head.eq_ignore_ascii_case(b"cs"))
            && self.src.get(self.pos) == Some(&b'-')
            && self.src.get(self.pos + 1).is_some_and(|c| c.is_ascii_alphabetic())
        {
            self.pos += 1;
            while word(self) {
                self.pos += 1;
            }
        }
        String::from_utf8(self.src[start..self.pos].to_vec()).expect("ascii")
    }

    fn name(&mut self) -> Result<Arc<ExprTree>, ExprError> {
        let start = self.pos;
        let name = self.ident();
        if !self.eat(b'(') {
            return Ok(ExprTree::feature(&name));
        }
        let op: Operator = name
            .replace('_', "-")
            .parse()
            .map_err(|e: String| ExprError { pos: start, message: e })?;
        if op.arity_class() == ArityClass::Indicator {
            return Err(ExprError { pos: start, message: format!("`{op}` is not a function") });
        }
        let mut args = vec![self.expr()?];
        while self.eat(b',') {
            args.push(self.expr()?);
        }
        if !self.eat(b')') {
            return Err(self.error("expected `,` or `)`"));
        }
        if args.len() != op.arity() {
            return Err(ExprError {
                pos: start,
                message: format!("`{op}` takes {} arguments, got {}", op.arity(), args.len()),
            });
        }
        Ok(ExprTree::node(op, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infix_and_prefix_agree() {
        let a = parse_expr("(close-open)/(high-low)").unwrap();
        let b = parse_expr("Div(Sub(close,open),Sub(high,low))").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "Div(Sub(close,open),Sub(high,low))");
    }

    #[test]
    fn precedence_and_negation() {
        let t = parse_expr("close - open * 2").unwrap();
        assert_eq!(t.to_string(), "Sub(close,Mul(open,2))");
        assert_eq!(parse_expr("-3").unwrap().to_string(), "-3");
        assert_eq!(parse_expr("-close").unwrap().to_string(), "Sub(0,close)");
        assert_eq!(parse_expr("a-b-c").unwrap().to_string(), "Sub(Sub(a,b),c)");
    }

    #[test]
    fn hyphenated_operators_round_trip() {
        for text in ["TS-Mean(volume,5)", "CS-Rank(TS-Corr(close,volume,10))", "Abs(Ln(close))"] {
            let t = parse_expr(text).unwrap();
            assert_eq!(t.to_string(), text);
            assert_eq!(parse_expr(&t.to_string()).unwrap(), t);
        }
        assert_eq!(parse_expr("ts_mean(close,1e1)").unwrap().to_string(), "TS-Mean(close,10)");
    }

    #[test]
    fn errors() {
        assert!(parse_expr("").is_err());
        assert!(parse_expr("(close").is_err());
        assert!(parse_expr("close)").is_err());
        assert!(parse_expr("Add(close)").is_err());
        assert!(parse_expr("Foo(close)").is_err());
        assert!(parse_expr("End()").is_err());
    }
}
