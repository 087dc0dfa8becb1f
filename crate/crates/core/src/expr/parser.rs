//! Lexer and recursive-descent parser for the expression grammar.
//!
//! Operator precedence, loosest first: `+ -`, then `* /`, then unary minus,
//! then `^` (right-associative). Whitespace is insignificant. Functions are
//! called by name: `sin cos tan exp log sqrt abs neg` take one argument,
//! `pow` takes two. Every error carries a byte offset into the source.

use crate::error::{Error, Result};
use crate::expr::ast::{BinOp, ExprAst, Node, UnaryFn};

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
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token plus the byte offset where it starts.
    fn next(&mut self) -> Result<(Tok, usize)> {
        self.skip_ws();
        let at = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, at));
        }
        let c = self.src[self.pos];
        let simple = match c {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = simple {
            self.pos += 1;
            return Ok((tok, at));
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.lex_number(at);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let name = std::str::from_utf8(&self.src[start..self.pos])
                .expect("identifier bytes are ascii")
                .to_owned();
            return Ok((Tok::Ident(name), at));
        }
        Err(Error::SyntaxError {
            offset: at,
            msg: format!("unexpected character `{}`", c as char),
        })
    }

    fn lex_number(&mut self, at: usize) -> Result<(Tok, usize)> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // `2e` with no digits: the `e` was not an exponent marker.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("digits are ascii");
        let value: f64 = text.parse().map_err(|_| Error::SyntaxError {
            offset: at,
            msg: format!("malformed numeric literal `{text}`"),
        })?;
        if !value.is_finite() {
            return Err(Error::SyntaxError {
                offset: at,
                msg: format!("numeric literal `{text}` overflows"),
            });
        }
        Ok((Tok::Num(value), at))
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    cursor: usize,
    vars: &'a [String],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.cursor]
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.cursor].clone();
        if self.cursor + 1 < self.toks.len() {
            self.cursor += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<usize> {
        let (tok, at) = self.bump();
        if tok == want {
            Ok(at)
        } else {
            Err(Error::SyntaxError {
                offset: at,
                msg: format!("expected {what}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().0 {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().0 {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek().0 == Tok::Minus {
            self.bump();
            let inner = self.unary()?;
            return Ok(Node::Unary(UnaryFn::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek().0 == Tok::Caret {
            self.bump();
            // The exponent re-enters at unary level, which both makes `^`
            // right-associative and lets `x ^ -2` parse.
            let exponent = self.unary()?;
            return Ok(Node::Binary(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let (tok, at) = self.bump();
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if self.peek().0 == Tok::LParen {
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while self.peek().0 == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "`)` to close the argument list")?;
                    return build_call(&name, args, at);
                }
                match self.vars.iter().position(|v| v == &name) {
                    Some(i) => Ok(Node::Var(i)),
                    None => Err(Error::UnknownVariable { name, offset: at }),
                }
            }
            Tok::End => Err(Error::SyntaxError {
                offset: at,
                msg: "unexpected end of expression".into(),
            }),
            other => Err(Error::SyntaxError {
                offset: at,
                msg: format!("unexpected token `{other:?}`"),
            }),
        }
    }
}

fn build_call(name: &str, mut args: Vec<Node>, at: usize) -> Result<Node> {
    if name == "pow" {
        if args.len() != 2 {
            return Err(Error::ArityError {
                name: name.into(),
                expected: 2,
                got: args.len(),
            });
        }
        let b = args.pop().expect("two arguments");
        let a = args.pop().expect("two arguments");
        return Ok(Node::Binary(BinOp::Pow, Box::new(a), Box::new(b)));
    }
    if let Some(func) = UnaryFn::from_name(name) {
        if args.len() != 1 {
            return Err(Error::ArityError {
                name: name.into(),
                expected: 1,
                got: args.len(),
            });
        }
        return Ok(Node::Unary(func, Box::new(args.pop().expect("one argument"))));
    }
    Err(Error::SyntaxError {
        offset: at,
        msg: format!("unknown function `{name}`"),
    })
}

/// Parse `src` against the declared variable names.
pub fn parse(src: &str, vars: &[String]) -> Result<ExprAst> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    loop {
        let t = lexer.next()?;
        let done = t.0 == Tok::End;
        toks.push(t);
        if done {
            break;
        }
    }
    let mut parser = Parser {
        toks,
        cursor: 0,
        vars,
    };
    let root = parser.expr()?;
    let (tok, at) = parser.bump();
    if tok != Tok::End {
        return Err(Error::SyntaxError {
            offset: at,
            msg: "trailing input after expression".into(),
        });
    }
    ExprAst::new(vars.to_vec(), root)
}
