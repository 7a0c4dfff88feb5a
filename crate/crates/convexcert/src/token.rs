//! Lexer for the expression language.
//!
//! Dot-prefixed operators (`.*`, `./`, `.^`) and the postfix transpose mark
//! (`'`) are single tokens. Token spans are byte ranges into the source, and
//! concatenating the token texts together with the skipped whitespace
//! reproduces the source exactly.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Number,
    Identifier,
    /// `+ - * / ^ , > < >= <=`
    Operator,
    /// `(` or `)`
    Paren,
    /// `.*`, `./` or `.^`
    DotOperator,
    /// `'`
    TransposeMark,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unexpected character {found:?} at byte {offset}")]
pub struct LexError {
    pub found: char,
    pub offset: usize,
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, LexError> {
    let mut tokens = Vec::new();
    let bytes = source.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = source[i..].chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let start = i;
        let (kind, len) = match c {
            '0'..='9' => (TokenKind::Number, number_len(&bytes[i..])),
            'a'..='z' | 'A'..='Z' => {
                let mut n = 1;
                while i + n < bytes.len()
                    && (bytes[i + n].is_ascii_alphanumeric() || bytes[i + n] == b'_')
                {
                    n += 1;
                }
                (TokenKind::Identifier, n)
            }
            '(' | ')' => (TokenKind::Paren, 1),
            '\'' => (TokenKind::TransposeMark, 1),
            '.' => {
                // A dot either prefixes an elementwise operator or starts a
                // fractional literal like ".5".
                match bytes.get(i + 1) {
                    Some(b'*') | Some(b'/') | Some(b'^') => (TokenKind::DotOperator, 2),
                    Some(b'0'..=b'9') => (TokenKind::Number, number_len(&bytes[i..])),
                    _ => return Err(LexError { found: c, offset: i }),
                }
            }
            '+' | '-' | '*' | '/' | '^' | ',' => (TokenKind::Operator, 1),
            '>' | '<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    (TokenKind::Operator, 2)
                } else {
                    (TokenKind::Operator, 1)
                }
            }
            _ => return Err(LexError { found: c, offset: i }),
        };
        i += len;
        tokens.push(Token {
            kind,
            text: source[start..i].to_string(),
            span: start..i,
        });
    }
    Ok(tokens)
}

/// Length of a decimal literal `123`, `1.5`, `.5`, `2e-3` starting at `bytes[0]`.
fn number_len(bytes: &[u8]) -> usize {
    let mut n = 0;
    while n < bytes.len() && bytes[n].is_ascii_digit() {
        n += 1;
    }
    if n < bytes.len() && bytes[n] == b'.' && bytes.get(n + 1).is_some_and(u8::is_ascii_digit) {
        n += 1;
        while n < bytes.len() && bytes[n].is_ascii_digit() {
            n += 1;
        }
    }
    if n < bytes.len()
        && (bytes[n] == b'e' || bytes[n] == b'E')
        && bytes[n + 1..]
            .iter()
            .next()
            .is_some_and(|&b| b.is_ascii_digit() || b == b'+' || b == b'-')
    {
        let mut m = n + 1;
        if bytes[m] == b'+' || bytes[m] == b'-' {
            m += 1;
        }
        if m < bytes.len() && bytes[m].is_ascii_digit() {
            while m < bytes.len() && bytes[m].is_ascii_digit() {
                m += 1;
            }
            n = m;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        tokenize(src).unwrap().iter().map(|t| t.kind).collect()
    }

    #[test]
    fn elementwise_power_is_one_token() {
        use TokenKind::*;
        assert_eq!(kinds("x.^2"), vec![Identifier, DotOperator, Number]);
    }

    #[test]
    fn empty_input() {
        assert_eq!(tokenize("").unwrap(), vec![]);
    }

    #[test]
    fn transpose_example() {
        use TokenKind::*;
        assert_eq!(
            kinds("(X*w-y)'"),
            vec![Paren, Identifier, Operator, Identifier, Operator, Identifier, Paren, TransposeMark]
        );
    }

    #[test]
    fn spans_reconstruct_source() {
        let src = "  (X*w - y)' * (X*w-y)  ";
        let toks = tokenize(src).unwrap();
        for t in &toks {
            assert_eq!(&src[t.span.clone()], t.text);
        }
    }

    #[test]
    fn rejects_bad_character() {
        let err = tokenize("x @ y").unwrap_err();
        assert_eq!(err.offset, 2);
        assert_eq!(err.found, '@');
    }

    #[test]
    fn scientific_notation() {
        let toks = tokenize("1e-3").unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].text, "1e-3");
    }
}
