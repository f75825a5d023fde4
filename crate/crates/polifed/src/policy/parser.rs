//! Concrete policy syntax.
//!
//! Grammar, loosest to tightest binding:
//!
//! ```text
//! union     := intersect ('+' intersect)*          left-associative
//! intersect := seq ('&' seq)*                      left-associative
//! seq       := unary ('.' unary)*                  left-associative
//! unary     := '!' unary | postfix
//! postfix   := atom '*'*
//! atom      := '0' | '1' | command | '(' union ')'
//! command   := ident [ '(' param (',' param)* ')' ]
//! param     := ident '=' (literal | '[' literal (',' literal)* ']')
//! literal   := string | number | 'true' | 'false'
//! ```
//!
//! Strings are single- or double-quoted with `\\` and `\<quote>` escapes.
//! Numbers are integers or floats (a `.` flanked by digits lexes as a float,
//! not a sequence operator). [`std::fmt::Display`] prints the same language
//! with minimal parentheses, so `parse_policy(p.to_string()) == p`.

use std::fmt;

use super::command::{CommandPattern, Literal, Value};
use super::Policy;

/// A syntax error, with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("policy syntax error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError {
            offset,
            message: message.into(),
        }
    }
}

/// Parses policy source text into an AST. The result is not reduced; callers
/// that need canonical form apply [`Policy::reduce`].
pub fn parse_policy(text: &str) -> Result<Policy, ParseError> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let policy = parser.union()?;
    match parser.peek() {
        None => Ok(policy),
        Some(tok) => Err(ParseError::new(
            tok.offset,
            format!("unexpected {} after policy", tok.kind.describe()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Ident(String),
    Str(String),
    Int(i64),
    Float(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Equals,
    Dot,
    Plus,
    Amp,
    Bang,
    Star,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Ident(name) => format!("identifier `{name}`"),
            TokenKind::Str(_) => "string literal".to_owned(),
            TokenKind::Int(v) => format!("integer `{v}`"),
            TokenKind::Float(v) => format!("number `{v}`"),
            TokenKind::LParen => "`(`".to_owned(),
            TokenKind::RParen => "`)`".to_owned(),
            TokenKind::LBracket => "`[`".to_owned(),
            TokenKind::RBracket => "`]`".to_owned(),
            TokenKind::Comma => "`,`".to_owned(),
            TokenKind::Equals => "`=`".to_owned(),
            TokenKind::Dot => "`.`".to_owned(),
            TokenKind::Plus => "`+`".to_owned(),
            TokenKind::Amp => "`&`".to_owned(),
            TokenKind::Bang => "`!`".to_owned(),
            TokenKind::Star => "`*`".to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
            }
            b'(' | b')' | b'[' | b']' | b',' | b'=' | b'+' | b'&' | b'!' | b'*' => {
                let kind = match b {
                    b'(' => TokenKind::LParen,
                    b')' => TokenKind::RParen,
                    b'[' => TokenKind::LBracket,
                    b']' => TokenKind::RBracket,
                    b',' => TokenKind::Comma,
                    b'=' => TokenKind::Equals,
                    b'+' => TokenKind::Plus,
                    b'&' => TokenKind::Amp,
                    b'!' => TokenKind::Bang,
                    _ => TokenKind::Star,
                };
                tokens.push(Token { kind, offset: start });
                i += 1;
            }
            b'.' => {
                tokens.push(Token {
                    kind: TokenKind::Dot,
                    offset: start,
                });
                i += 1;
            }
            b'"' | b'\'' => {
                let quote = b;
                i += 1;
                let mut s = String::new();
                loop {
                    if i >= bytes.len() {
                        return Err(ParseError::new(start, "unterminated string literal"));
                    }
                    let c = bytes[i];
                    if c == quote {
                        i += 1;
                        break;
                    }
                    if c == b'\\' {
                        if i + 1 >= bytes.len() {
                            return Err(ParseError::new(i, "unterminated escape"));
                        }
                        let esc = bytes[i + 1];
                        match esc {
                            b'\\' | b'"' | b'\'' => s.push(esc as char),
                            _ => {
                                return Err(ParseError::new(
                                    i,
                                    format!("unknown escape `\\{}`", esc as char),
                                ))
                            }
                        }
                        i += 2;
                    } else {
                        // Consume one UTF-8 character.
                        let ch_len = utf8_len(c);
                        let end = (i + ch_len).min(bytes.len());
                        s.push_str(
                            std::str::from_utf8(&bytes[i..end])
                                .map_err(|_| ParseError::new(i, "invalid UTF-8 in string"))?,
                        );
                        i = end;
                    }
                }
                tokens.push(Token {
                    kind: TokenKind::Str(s),
                    offset: start,
                });
            }
            b'-' | b'0'..=b'9' => {
                if b == b'-' && !(i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()) {
                    return Err(ParseError::new(start, "`-` must start a number"));
                }
                let mut j = i + 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                let mut is_float = false;
                // A dot is part of the number only when flanked by digits;
                // otherwise it is the sequence operator.
                if j + 1 < bytes.len() && bytes[j] == b'.' && bytes[j + 1].is_ascii_digit() {
                    is_float = true;
                    j += 2;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        is_float = true;
                        j = k + 1;
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let slice = &text[i..j];
                let kind = if is_float {
                    TokenKind::Float(
                        slice
                            .parse::<f64>()
                            .map_err(|_| ParseError::new(start, "invalid number"))?,
                    )
                } else {
                    TokenKind::Int(
                        slice
                            .parse::<i64>()
                            .map_err(|_| ParseError::new(start, "integer out of range"))?,
                    )
                };
                tokens.push(Token { kind, offset: start });
                i = j;
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut j = i + 1;
                while j < bytes.len()
                    && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
                {
                    j += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(text[i..j].to_owned()),
                    offset: start,
                });
                i = j;
            }
            _ => {
                return Err(ParseError::new(
                    start,
                    format!("unexpected character `{}`", bytes[start] as char),
                ))
            }
        }
    }
    Ok(tokens)
}

fn utf8_len(first: u8) -> usize {
    match first {
        0x00..=0x7f => 1,
        0xc0..=0xdf => 2,
        0xe0..=0xef => 3,
        _ => 4,
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn eof_offset(&self) -> usize {
        self.tokens.last().map(|t| t.offset + 1).unwrap_or(0)
    }

    fn expect(&mut self, want: TokenKind, what: &str) -> Result<(), ParseError> {
        match self.bump() {
            Some(tok) if tok.kind == want => Ok(()),
            Some(tok) => Err(ParseError::new(
                tok.offset,
                format!("expected {what}, found {}", tok.kind.describe()),
            )),
            None => Err(ParseError::new(
                self.eof_offset(),
                format!("expected {what}, found end of input"),
            )),
        }
    }

    fn union(&mut self) -> Result<Policy, ParseError> {
        let mut left = self.intersect()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Plus)) {
            self.bump();
            let right = self.intersect()?;
            left = Policy::Union(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn intersect(&mut self) -> Result<Policy, ParseError> {
        let mut left = self.seq()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Amp)) {
            self.bump();
            let right = self.seq()?;
            left = Policy::Intersect(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn seq(&mut self) -> Result<Policy, ParseError> {
        let mut left = self.unary()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Dot)) {
            self.bump();
            let right = self.unary()?;
            left = Policy::Seq(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Policy, ParseError> {
        if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Bang)) {
            self.bump();
            let inner = self.unary()?;
            return Ok(Policy::Neg(Box::new(inner)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Policy, ParseError> {
        let mut p = self.atom()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Star)) {
            self.bump();
            p = Policy::Star(Box::new(p));
        }
        Ok(p)
    }

    fn atom(&mut self) -> Result<Policy, ParseError> {
        let tok = self.bump().ok_or_else(|| {
            ParseError::new(self.eof_offset(), "expected a policy, found end of input")
        })?;
        match tok.kind {
            TokenKind::Int(0) => Ok(Policy::Zero),
            TokenKind::Int(1) => Ok(Policy::One),
            TokenKind::LParen => {
                let inner = self.union()?;
                match self.bump() {
                    Some(t) if t.kind == TokenKind::RParen => Ok(inner),
                    Some(t) => Err(ParseError::new(
                        t.offset,
                        format!("unbalanced parentheses: expected `)`, found {}", t.kind.describe()),
                    )),
                    None => Err(ParseError::new(
                        self.eof_offset(),
                        "unbalanced parentheses: missing `)`",
                    )),
                }
            }
            TokenKind::Ident(name) => {
                let mut pattern = CommandPattern::bare(name);
                if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::LParen)) {
                    self.bump();
                    if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::RParen)) {
                        self.bump();
                    } else {
                        loop {
                            let (key, key_offset) = match self.bump() {
                                Some(Token {
                                    kind: TokenKind::Ident(k),
                                    offset,
                                }) => (k, offset),
                                Some(t) => {
                                    return Err(ParseError::new(
                                        t.offset,
                                        format!(
                                            "expected parameter name, found {}",
                                            t.kind.describe()
                                        ),
                                    ))
                                }
                                None => {
                                    return Err(ParseError::new(
                                        self.eof_offset(),
                                        "expected parameter name, found end of input",
                                    ))
                                }
                            };
                            self.expect(TokenKind::Equals, "`=`")?;
                            let value = self.value()?;
                            if pattern.params.insert(key.clone(), value).is_some() {
                                return Err(ParseError::new(
                                    key_offset,
                                    format!("duplicate parameter `{key}`"),
                                ));
                            }
                            match self.bump() {
                                Some(t) if t.kind == TokenKind::Comma => continue,
                                Some(t) if t.kind == TokenKind::RParen => break,
                                Some(t) => {
                                    return Err(ParseError::new(
                                        t.offset,
                                        format!(
                                            "expected `,` or `)`, found {}",
                                            t.kind.describe()
                                        ),
                                    ))
                                }
                                None => {
                                    return Err(ParseError::new(
                                        self.eof_offset(),
                                        "unbalanced parentheses: missing `)`",
                                    ))
                                }
                            }
                        }
                    }
                }
                Ok(Policy::Cmd(pattern))
            }
            other => Err(ParseError::new(
                tok.offset,
                format!("expected a policy, found {}", other.describe()),
            )),
        }
    }

    fn value(&mut self) -> Result<Value, ParseError> {
        if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::LBracket)) {
            self.bump();
            let mut items = Vec::new();
            if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::RBracket)) {
                self.bump();
                return Ok(Value::List(items).normalized());
            }
            loop {
                items.push(self.literal()?);
                match self.bump() {
                    Some(t) if t.kind == TokenKind::Comma => continue,
                    Some(t) if t.kind == TokenKind::RBracket => break,
                    Some(t) => {
                        return Err(ParseError::new(
                            t.offset,
                            format!("expected `,` or `]`, found {}", t.kind.describe()),
                        ))
                    }
                    None => {
                        return Err(ParseError::new(self.eof_offset(), "missing `]`"))
                    }
                }
            }
            Ok(Value::List(items).normalized())
        } else {
            Ok(Value::Lit(self.literal()?))
        }
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        match self.bump() {
            Some(Token {
                kind: TokenKind::Str(s),
                ..
            }) => Ok(Literal::Str(s)),
            Some(Token {
                kind: TokenKind::Int(v),
                ..
            }) => Ok(Literal::Int(v)),
            Some(Token {
                kind: TokenKind::Float(v),
                ..
            }) => Ok(Literal::Float(v)),
            Some(Token {
                kind: TokenKind::Ident(name),
                offset,
            }) => match name.as_str() {
                "true" => Ok(Literal::Bool(true)),
                "false" => Ok(Literal::Bool(false)),
                _ => Err(ParseError::new(
                    offset,
                    format!("expected a literal, found identifier `{name}`"),
                )),
            },
            Some(t) => Err(ParseError::new(
                t.offset,
                format!("expected a literal, found {}", t.kind.describe()),
            )),
            None => Err(ParseError::new(
                self.eof_offset(),
                "expected a literal, found end of input",
            )),
        }
    }
}

// Precedence levels for printing: union 0, intersect 1, seq 2, unary 3, atom 4.
fn level(p: &Policy) -> u8 {
    match p {
        Policy::Union(..) => 0,
        Policy::Intersect(..) => 1,
        Policy::Seq(..) => 2,
        Policy::Neg(_) | Policy::Star(_) => 3,
        Policy::Zero | Policy::One | Policy::Cmd(_) => 4,
    }
}

fn write_policy(p: &Policy, min_level: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let needs_parens = level(p) < min_level;
    if needs_parens {
        write!(f, "(")?;
    }
    match p {
        Policy::Zero => write!(f, "0")?,
        Policy::One => write!(f, "1")?,
        Policy::Cmd(pat) => write!(f, "{pat}")?,
        Policy::Seq(a, b) => {
            // Spaced so a `0`/`1` atom next to the dot never lexes as a float.
            write_policy(a, 2, f)?;
            write!(f, " . ")?;
            write_policy(b, 3, f)?;
        }
        Policy::Intersect(a, b) => {
            write_policy(a, 1, f)?;
            write!(f, " & ")?;
            write_policy(b, 2, f)?;
        }
        Policy::Union(a, b) => {
            write_policy(a, 0, f)?;
            write!(f, " + ")?;
            write_policy(b, 1, f)?;
        }
        Policy::Neg(a) => {
            write!(f, "!")?;
            write_policy(a, 3, f)?;
        }
        Policy::Star(a) => {
            write_policy(a, 4, f)?;
            write!(f, "*")?;
        }
    }
    if needs_parens {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_policy(self, 0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CommandInvocation, Policy};
    use super::*;

    #[test]
    fn sequences_parse_left_associative() {
        let p = parse_policy("get_data . runFL . return").unwrap();
        let expected = Policy::Seq(
            Box::new(Policy::Seq(
                Box::new(Policy::cmd("get_data")),
                Box::new(Policy::cmd("runFL")),
            )),
            Box::new(Policy::cmd("return")),
        );
        assert_eq!(p, expected);
    }

    #[test]
    fn zero_and_one_literals_parse() {
        assert_eq!(parse_policy("0").unwrap(), Policy::Zero);
        assert_eq!(parse_policy("1").unwrap(), Policy::One);
    }

    #[test]
    fn list_valued_params_parse_into_one_constraint() {
        let p = parse_policy("filter(sensors=['mic','loc'])").unwrap();
        match p {
            Policy::Cmd(pat) => {
                assert_eq!(pat.name, "filter");
                assert_eq!(pat.params.len(), 1);
                let v = pat.params.get("sensors").unwrap();
                assert_eq!(
                    *v,
                    Value::List(vec![Literal::from("loc"), Literal::from("mic")])
                );
            }
            other => panic!("expected a command, got {other:?}"),
        }
    }

    #[test]
    fn sequence_binds_tighter_than_intersection_which_binds_tighter_than_union() {
        let p = parse_policy("a . b + c & d . e").unwrap();
        // Parses as (a.b) + (c & (d.e)).
        let expected = Policy::Union(
            Box::new(Policy::Seq(
                Box::new(Policy::cmd("a")),
                Box::new(Policy::cmd("b")),
            )),
            Box::new(Policy::Intersect(
                Box::new(Policy::cmd("c")),
                Box::new(Policy::Seq(
                    Box::new(Policy::cmd("d")),
                    Box::new(Policy::cmd("e")),
                )),
            )),
        );
        assert_eq!(p, expected);
    }

    #[test]
    fn star_is_postfix_and_bang_is_prefix() {
        let p = parse_policy("!a*").unwrap();
        assert_eq!(
            p,
            Policy::Neg(Box::new(Policy::Star(Box::new(Policy::cmd("a")))))
        );
        let q = parse_policy("(!a)*").unwrap();
        assert_eq!(
            q,
            Policy::Star(Box::new(Policy::Neg(Box::new(Policy::cmd("a")))))
        );
    }

    #[test]
    fn display_round_trips_for_handwritten_policies() {
        let texts = [
            "get_data(data_type=\"reddit\").runFL.enforce_privacy_budget(max_eps=1).return",
            "get_data(data_type=\"MPU\").filter(sensors=['mic','loc']).runFL.return",
            "(a + b)*.c",
            "!(a & b).c + 1",
            "a.(b.c)",
            "in_geofence_cond(geofence=\"campus\").get_data.runFL.return",
            "c(k=1.5,n=-2,flag=true,name='x')",
        ];
        for text in texts {
            let p = parse_policy(text).unwrap();
            let printed = p.to_string();
            let back = parse_policy(&printed)
                .unwrap_or_else(|e| panic!("reparse of `{printed}` failed: {e}"));
            assert_eq!(back, p, "round-trip failed for `{text}` -> `{printed}`");
        }
    }

    #[test]
    fn dots_between_digits_lex_as_floats() {
        let p = parse_policy("c(eps=1.5)").unwrap();
        match p {
            Policy::Cmd(pat) => {
                assert_eq!(pat.params.get("eps"), Some(&Value::Lit(Literal::Float(1.5))));
            }
            other => panic!("expected command, got {other:?}"),
        }
    }

    #[test]
    fn one_can_appear_inside_sequences() {
        let p = parse_policy("a.1.b").unwrap();
        let expected = Policy::Seq(
            Box::new(Policy::Seq(
                Box::new(Policy::cmd("a")),
                Box::new(Policy::One),
            )),
            Box::new(Policy::cmd("b")),
        );
        assert_eq!(p, expected);
    }

    #[test]
    fn syntax_errors_carry_byte_offsets() {
        let err = parse_policy("a . ").unwrap_err();
        assert!(err.offset >= 3, "offset was {}", err.offset);
        let err = parse_policy("(a + b").unwrap_err();
        assert!(err.message.contains("parenthes"), "{}", err.message);
        let err = parse_policy("c(k=\"a\\qb\")").unwrap_err();
        assert!(err.message.contains("unknown escape"), "{}", err.message);
        let err = parse_policy("a @ b").unwrap_err();
        assert!(err.message.contains("unexpected character"), "{}", err.message);
    }

    #[test]
    fn duplicate_params_are_rejected() {
        let err = parse_policy("c(k=1,k=2)").unwrap_err();
        assert!(err.message.contains("duplicate"), "{}", err.message);
    }

    #[test]
    fn quoted_strings_support_both_quote_styles_and_escapes() {
        let p = parse_policy(r#"c(a='it\'s',b="q\"q",c='\\')"#).unwrap();
        match p {
            Policy::Cmd(pat) => {
                assert_eq!(pat.params.get("a"), Some(&Value::Lit(Literal::from("it's"))));
                assert_eq!(pat.params.get("b"), Some(&Value::Lit(Literal::from("q\"q"))));
                assert_eq!(pat.params.get("c"), Some(&Value::Lit(Literal::from("\\"))));
            }
            other => panic!("expected command, got {other:?}"),
        }
    }

    #[test]
    fn reduced_policies_round_trip_through_display() {
        let p = parse_policy("(b + a + b).(1.c).(d & d & e)*").unwrap().reduce();
        let back = parse_policy(&p.to_string()).unwrap();
        assert_eq!(back, p);
        assert!(p.accepts_trace(&[
            CommandInvocation::bare("a"),
            CommandInvocation::bare("c"),
        ]));
    }
}
