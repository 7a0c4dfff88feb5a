//! Recursive descent parser for the expression grammar and assumption
//! clauses.
//!
//! Precedence, tightest first: transpose, then `^`/`.^` (right associative),
//! then unary minus, then `*` `/` `.*` `./`, then `+` `-`. The multiplicative
//! and additive levels are left associative.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

use crate::ast::{Assumption, Ast, BinaryOp, Func, Relation, UnaryOp};
use crate::token::{tokenize, LexError, Token, TokenKind};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("expected {expected} at byte {offset}, found {found:?}")]
    Unexpected {
        expected: &'static str,
        found: String,
        offset: usize,
    },
    #[error("unexpected end of input, expected {expected}")]
    Eof { expected: &'static str },
    #[error("unknown function {name:?} at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("malformed number {text:?} at byte {offset}")]
    BadNumber { text: String, offset: usize },
}

pub fn parse(source: &str) -> Result<Ast, ParseError> {
    parse_expression(&tokenize(source)?)
}

pub fn parse_expression(tokens: &[Token]) -> Result<Ast, ParseError> {
    let mut p = Parser { tokens, pos: 0 };
    let ast = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ParseError::Unexpected {
            expected: "end of input",
            found: t.text.clone(),
            offset: t.span.start,
        });
    }
    Ok(ast)
}

/// Parses comma-separated clauses of the form `x > 0` (the constant may also
/// appear on the left, as in `0 < x`).
pub fn parse_assumptions(source: &str) -> Result<Vec<Assumption>, ParseError> {
    let tokens = tokenize(source)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut p = Parser {
        tokens: &tokens,
        pos: 0,
    };
    let mut out = Vec::new();
    loop {
        out.push(p.assumption()?);
        match p.peek() {
            None => break,
            Some(t) if t.text == "," => {
                p.pos += 1;
            }
            Some(t) => {
                return Err(ParseError::Unexpected {
                    expected: "`,` between clauses",
                    found: t.text.clone(),
                    offset: t.span.start,
                })
            }
        }
    }
    Ok(out)
}

/// Evaluates a constant expression tree, e.g. the bound side of a clause.
fn const_eval_ast(ast: &Ast) -> Option<BigRational> {
    use crate::ast::{BinaryOp, UnaryOp};
    match ast {
        Ast::Number(r) => Some(r.clone()),
        Ast::Unary(UnaryOp::Neg, a) => Some(-const_eval_ast(a)?),
        Ast::Binary(op, a, b) => {
            let (a, b) = (const_eval_ast(a)?, const_eval_ast(b)?);
            match op {
                BinaryOp::Add => Some(a + b),
                BinaryOp::Sub => Some(a - b),
                BinaryOp::Mul | BinaryOp::ElemMul => Some(a * b),
                BinaryOp::Div | BinaryOp::ElemDiv => (!b.is_zero()).then(|| a / b),
                _ => None,
            }
        }
        _ => None,
    }
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat_op(&mut self, ops: &[&str]) -> Option<&'a str> {
        match self.peek() {
            Some(t)
                if (t.kind == TokenKind::Operator || t.kind == TokenKind::DotOperator)
                    && ops.contains(&t.text.as_str()) =>
            {
                self.pos += 1;
                Some(&self.tokens[self.pos - 1].text)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Ast, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            let rhs = self.term()?;
            let kind = if op == "+" { BinaryOp::Add } else { BinaryOp::Sub };
            lhs = Ast::Binary(kind, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Ast, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/", ".*", "./"]) {
            let kind = match op {
                "*" => BinaryOp::Mul,
                "/" => BinaryOp::Div,
                ".*" => BinaryOp::ElemMul,
                _ => BinaryOp::ElemDiv,
            };
            let rhs = self.unary()?;
            lhs = Ast::Binary(kind, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Ast, ParseError> {
        if self.eat_op(&["-"]).is_some() {
            let inner = self.unary()?;
            return Ok(Ast::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.factor()
    }

    /// `factor ::= atom ['] [[.]^ factor]`
    fn factor(&mut self) -> Result<Ast, ParseError> {
        let mut base = self.atom()?;
        if matches!(self.peek(), Some(t) if t.kind == TokenKind::TransposeMark) {
            self.pos += 1;
            base = Ast::Unary(UnaryOp::Transpose, Box::new(base));
        }
        if let Some(op) = self.eat_op(&["^", ".^"]) {
            let kind = if op == "^" { BinaryOp::Pow } else { BinaryOp::ElemPow };
            // The grammar's factor rule is right recursive; exponents may
            // carry a leading minus as in `x.^(-1)` written `x.^-1`.
            let exponent = self.unary()?;
            base = Ast::Binary(kind, Box::new(base), Box::new(exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast, ParseError> {
        let t = self.bump().ok_or(ParseError::Eof { expected: "an atom" })?;
        match t.kind {
            TokenKind::Number => Ok(Ast::Number(parse_rational(&t.text).ok_or_else(|| {
                ParseError::BadNumber {
                    text: t.text.clone(),
                    offset: t.span.start,
                }
            })?)),
            TokenKind::Identifier => {
                if matches!(self.peek(), Some(p) if p.text == "(") {
                    let func = Func::from_name(&t.text).ok_or_else(|| ParseError::UnknownFunction {
                        name: t.text.clone(),
                        offset: t.span.start,
                    })?;
                    self.pos += 1; // (
                    let arg = self.expr()?;
                    self.expect_paren(")")?;
                    Ok(Ast::Call(func, Box::new(arg)))
                } else {
                    Ok(Ast::Variable(t.text.clone()))
                }
            }
            TokenKind::Paren if t.text == "(" => {
                let inner = self.expr()?;
                self.expect_paren(")")?;
                Ok(inner)
            }
            _ => Err(ParseError::Unexpected {
                expected: "a number, variable, function call or `(`",
                found: t.text.clone(),
                offset: t.span.start,
            }),
        }
    }

    fn expect_paren(&mut self, which: &'static str) -> Result<(), ParseError> {
        match self.bump() {
            Some(t) if t.text == which => Ok(()),
            Some(t) => Err(ParseError::Unexpected {
                expected: "`)`",
                found: t.text.clone(),
                offset: t.span.start,
            }),
            None => Err(ParseError::Eof { expected: "`)`" }),
        }
    }

    fn assumption(&mut self) -> Result<Assumption, ParseError> {
        // `expr rel number` or `number rel expr`. The subject may be a full
        // expression (e.g. `sum(exp(x)) >= 1`), not just a variable name.
        if self.peek().is_none() {
            return Err(ParseError::Eof { expected: "a clause" });
        }
        let offset = self.peek().map_or(0, |t| t.span.start);
        let left = self.expr()?;
        if let Some(bound) = const_eval_ast(&left) {
            let relation = self.relation()?.flipped();
            let subject = self.expr()?;
            Ok(Assumption {
                subject: crate::ast::render(&subject),
                relation,
                bound,
            })
        } else {
            let relation = self.relation()?;
            let right = self.expr()?;
            let bound = const_eval_ast(&right).ok_or_else(|| ParseError::Unexpected {
                expected: "a numeric bound",
                found: crate::ast::render(&right),
                offset,
            })?;
            Ok(Assumption {
                subject: crate::ast::render(&left),
                relation,
                bound,
            })
        }
    }

    fn relation(&mut self) -> Result<Relation, ParseError> {
        match self.bump() {
            Some(t) if t.text == ">" => Ok(Relation::Gt),
            Some(t) if t.text == ">=" => Ok(Relation::Ge),
            Some(t) if t.text == "<" => Ok(Relation::Lt),
            Some(t) if t.text == "<=" => Ok(Relation::Le),
            Some(t) => Err(ParseError::Unexpected {
                expected: "a relation (> >= < <=)",
                found: t.text.clone(),
                offset: t.span.start,
            }),
            None => Err(ParseError::Eof { expected: "a relation" }),
        }
    }

}

/// Exact rational value of a decimal literal, e.g. `1.25` -> 5/4, `2e-3` ->
/// 1/500.
pub fn parse_rational(text: &str) -> Option<BigRational> {
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(i) => (&text[..i], text[i + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (int_part, frac_part) = match mantissa.find('.') {
        Some(i) => (&mantissa[..i], &mantissa[i + 1..]),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits: String = format!("{int_part}{frac_part}");
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let numer: BigInt = digits.parse().ok()?;
    let scale = frac_part.len() as i32 - exponent;
    let ten = BigInt::from(10);
    let value = if scale >= 0 {
        BigRational::new(numer, ten.pow(scale as u32))
    } else {
        BigRational::from_integer(numer * ten.pow((-scale) as u32))
    };
    Some(if value.is_zero() { BigRational::zero() } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::render;

    fn p(src: &str) -> Ast {
        parse(src).unwrap()
    }

    #[test]
    fn logistic_structure() {
        let ast = p("log(1+exp(x))");
        assert_eq!(
            ast,
            Ast::Call(
                Func::Log,
                Box::new(Ast::Binary(
                    BinaryOp::Add,
                    Box::new(Ast::num_int(1)),
                    Box::new(Ast::Call(Func::Exp, Box::new(Ast::var("x")))),
                ))
            )
        );
    }

    #[test]
    fn single_leaf() {
        assert_eq!(p("x"), Ast::var("x"));
    }

    #[test]
    fn inverse_product() {
        let ast = p("1/exp(sum(log(x)))");
        let inner = Ast::Call(
            Func::Exp,
            Box::new(Ast::Call(Func::Sum, Box::new(Ast::Call(Func::Log, Box::new(Ast::var("x")))))),
        );
        assert_eq!(
            ast,
            Ast::Binary(BinaryOp::Div, Box::new(Ast::num_int(1)), Box::new(inner))
        );
    }

    #[test]
    fn precedence_mul_over_add() {
        assert_eq!(
            p("a+b*c"),
            Ast::Binary(
                BinaryOp::Add,
                Box::new(Ast::var("a")),
                Box::new(Ast::Binary(
                    BinaryOp::Mul,
                    Box::new(Ast::var("b")),
                    Box::new(Ast::var("c"))
                ))
            )
        );
    }

    #[test]
    fn unary_minus_below_power() {
        // -x^2 parses as -(x^2)
        assert_eq!(
            p("-x^2"),
            Ast::Unary(
                UnaryOp::Neg,
                Box::new(Ast::Binary(
                    BinaryOp::Pow,
                    Box::new(Ast::var("x")),
                    Box::new(Ast::num_int(2))
                ))
            )
        );
    }

    #[test]
    fn transpose_binds_tighter_than_power() {
        assert_eq!(
            p("x'^2"),
            Ast::Binary(
                BinaryOp::Pow,
                Box::new(Ast::Unary(UnaryOp::Transpose, Box::new(Ast::var("x")))),
                Box::new(Ast::num_int(2))
            )
        );
    }

    #[test]
    fn negative_elementwise_exponent() {
        assert_eq!(
            p("x.^(-1)"),
            Ast::Binary(
                BinaryOp::ElemPow,
                Box::new(Ast::var("x")),
                Box::new(Ast::Unary(UnaryOp::Neg, Box::new(Ast::num_int(1))))
            )
        );
    }

    #[test]
    fn unknown_function_rejected() {
        assert!(matches!(
            parse("frobnicate(x)"),
            Err(ParseError::UnknownFunction { .. })
        ));
    }

    #[test]
    fn error_carries_position() {
        match parse("x + * y") {
            Err(ParseError::Unexpected { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected Unexpected, got {other:?}"),
        }
    }

    #[test]
    fn assumptions_basic() {
        let a = parse_assumptions("x>0, y>0").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].subject, "x");
        assert_eq!(a[0].relation, Relation::Gt);
        assert!(a[0].bound.is_zero());
        assert_eq!(a[1].subject, "y");
    }

    #[test]
    fn assumptions_empty() {
        assert_eq!(parse_assumptions("").unwrap(), vec![]);
    }

    #[test]
    fn assumption_ge_and_flipped() {
        let a = parse_assumptions("x>=1").unwrap();
        assert_eq!(a[0].relation, Relation::Ge);
        let b = parse_assumptions("0<x").unwrap();
        assert_eq!(b[0].relation, Relation::Gt);
        assert_eq!(b[0].subject, "x");
    }

    #[test]
    fn render_examples() {
        assert_eq!(render(&Ast::var("x")), "x");
        assert_eq!(
            render(&Ast::Binary(
                BinaryOp::Add,
                Box::new(Ast::var("x")),
                Box::new(Ast::num_int(1))
            )),
            "(x + 1)"
        );
        let a = Ast::Call(Func::Sum, Box::new(Ast::Call(Func::Exp, Box::new(Ast::var("x")))));
        assert_eq!(render(&a), "sum(exp(x))");
        assert_eq!(p(&render(&a)), a);
    }

    #[test]
    fn rational_literals_exact() {
        assert_eq!(
            parse_rational("1.25").unwrap(),
            BigRational::new(5.into(), 4.into())
        );
        assert_eq!(
            parse_rational("2e-3").unwrap(),
            BigRational::new(1.into(), 500.into())
        );
    }
}
