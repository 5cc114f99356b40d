//! Boolean conditions over entry attributes.
//!
//! Grammar (keywords are case-insensitive):
//!
//! ```text
//! cond    := <empty> | or
//! or      := and ("OR" and)*
//! and     := unary ("AND" unary)*
//! unary   := "NOT" unary | "(" or ")" | term
//! term    := name op literal
//! op      := "=" | "!=" | "<" | "<=" | ">" | ">=" | "LIKE"
//! literal := integer | float | 'text'     ('' inside text is a quote)
//! ```
//!
//! An empty condition is always true. A term whose attribute is NULL, missing
//! from the schema, or of a type the literal cannot be compared with,
//! evaluates to false; `NOT` still negates that false.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::value::{AttrType, AttributeDef, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Like,
}

impl CmpOp {
    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Like => "LIKE",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
            CmpOp::Like => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => write!(f, "{x:?}"),
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub attr: String,
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    True,
    Term(Term),
    Not(Box<Condition>),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
}

impl Condition {
    pub fn parse(text: &str) -> Result<Condition> {
        let tokens = lex(text)?;
        if tokens.is_empty() {
            return Ok(Condition::True);
        }
        let mut parser = Parser { tokens, pos: 0 };
        let cond = parser.or()?;
        if parser.pos != parser.tokens.len() {
            return Err(bad(format!("unexpected {}", shown(parser.tokens.get(parser.pos)))));
        }
        Ok(cond)
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Condition::True)
    }

    /// Validates attribute names and literal types against a schema.
    pub fn check(&self, schema: &[AttributeDef]) -> Result<()> {
        match self {
            Condition::True => Ok(()),
            Condition::Term(t) => {
                let def = schema
                    .iter()
                    .find(|d| d.name == t.attr)
                    .ok_or_else(|| bad(format!("unknown attribute {}", t.attr)))?;
                if type_consistent(def.ty, t.op, &t.literal) {
                    Ok(())
                } else {
                    Err(bad(format!("{} cannot be compared with {}", def.ty, t.literal)))
                }
            }
            Condition::Not(c) => c.check(schema),
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.check(schema)?;
                b.check(schema)
            }
        }
    }

    /// Evaluates against one entry. `schema` and `values` are aligned.
    pub fn eval(&self, schema: &[AttributeDef], values: &[Value]) -> bool {
        match self {
            Condition::True => true,
            Condition::Term(t) => {
                let Some(idx) = schema.iter().position(|d| d.name == t.attr) else {
                    return false;
                };
                let Some(value) = values.get(idx) else {
                    return false;
                };
                if !type_consistent(schema[idx].ty, t.op, &t.literal) {
                    return false;
                }
                eval_term(value, t.op, &t.literal)
            }
            Condition::Not(c) => !c.eval(schema, values),
            Condition::And(a, b) => a.eval(schema, values) && b.eval(schema, values),
            Condition::Or(a, b) => a.eval(schema, values) || b.eval(schema, values),
        }
    }

    /// Names of every attribute referenced by a term.
    pub fn attributes(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_attrs(&mut out);
        out
    }

    fn collect_attrs<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Condition::True => {}
            Condition::Term(t) => out.push(&t.attr),
            Condition::Not(c) => c.collect_attrs(out),
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.collect_attrs(out);
                b.collect_attrs(out);
            }
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::True => Ok(()),
            Condition::Term(t) => write!(f, "{} {} {}", t.attr, t.op.as_str(), t.literal),
            Condition::Not(c) => write!(f, "NOT ({c})"),
            Condition::And(a, b) => write!(f, "({a}) AND ({b})"),
            Condition::Or(a, b) => write!(f, "({a}) OR ({b})"),
        }
    }
}

fn bad(msg: String) -> Error {
    Error::BadCondition(msg)
}

fn type_consistent(ty: AttrType, op: CmpOp, lit: &Literal) -> bool {
    match (ty, lit) {
        (AttrType::Str, Literal::Str(_)) => true,
        (_, _) if op == CmpOp::Like => false,
        (AttrType::Int | AttrType::Timestamp, Literal::Int(_)) => true,
        (AttrType::Float, Literal::Int(_) | Literal::Float(_)) => true,
        _ => false,
    }
}

fn eval_term(value: &Value, op: CmpOp, lit: &Literal) -> bool {
    let ord = match (value, lit) {
        (Value::Null, _) => return false,
        (Value::Str(s), Literal::Str(p)) if op == CmpOp::Like => return like(s, p),
        (Value::Str(s), Literal::Str(p)) => s.as_str().cmp(p.as_str()),
        (Value::Int(v) | Value::Timestamp(v), Literal::Int(l)) => v.cmp(l),
        (Value::Float(v), Literal::Int(l)) => match v.partial_cmp(&(*l as f64)) {
            Some(o) => o,
            None => return false,
        },
        (Value::Float(v), Literal::Float(l)) => match v.partial_cmp(l) {
            Some(o) => o,
            None => return false,
        },
        _ => return false,
    };
    op.holds(ord)
}

/// SQL-style `LIKE` where `%` matches any run of characters (possibly
/// empty) and every other character matches itself.
pub fn like(text: &str, pattern: &str) -> bool {
    let t: Vec<char> = text.chars().collect();
    let p: Vec<char> = pattern.chars().collect();
    let (mut ti, mut pi) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '%' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '%')
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Op(CmpOp),
    Lit(Literal),
    And,
    Or,
    Not,
    LParen,
    RParen,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Op(op) => write!(f, "{}", op.as_str()),
            Tok::Lit(l) => write!(f, "{l}"),
            Tok::And => write!(f, "AND"),
            Tok::Or => write!(f, "OR"),
            Tok::Not => write!(f, "NOT"),
            Tok::LParen => write!(f, "("),
            Tok::RParen => write!(f, ")"),
        }
    }
}

fn shown(tok: Option<&Tok>) -> String {
    tok.map_or_else(|| "end of condition".to_string(), |t| format!("'{t}'"))
}

fn lex(text: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '=' => {
                out.push(Tok::Op(CmpOp::Eq));
                i += 1;
            }
            '!' if chars.get(i + 1) == Some(&'=') => {
                out.push(Tok::Op(CmpOp::Ne));
                i += 2;
            }
            '<' | '>' => {
                let eq = chars.get(i + 1) == Some(&'=');
                let op = match (c, eq) {
                    ('<', true) => CmpOp::Le,
                    ('<', false) => CmpOp::Lt,
                    ('>', true) => CmpOp::Ge,
                    _ => CmpOp::Gt,
                };
                out.push(Tok::Op(op));
                i += if eq { 2 } else { 1 };
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(bad("unterminated string literal".into())),
                        Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some('\'') => {
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Tok::Lit(Literal::Str(s)));
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || matches!(chars[i], '.' | '+' | '-'))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(Tok::Lit(number(&word)?));
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || matches!(chars[i], '_' | '.' | '-')) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(match word.to_ascii_uppercase().as_str() {
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "NOT" => Tok::Not,
                    "LIKE" => Tok::Op(CmpOp::Like),
                    _ => Tok::Ident(word),
                });
            }
            other => return Err(bad(format!("unexpected character {other:?}"))),
        }
    }
    Ok(out)
}

fn number(word: &str) -> Result<Literal> {
    if let Ok(i) = word.parse::<i64>() {
        return Ok(Literal::Int(i));
    }
    match word.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok(Literal::Float(f)),
        _ => Err(bad(format!("bad number {word}"))),
    }
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn or(&mut self) -> Result<Condition> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            let rhs = self.and()?;
            lhs = Condition::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Condition> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Condition::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Condition> {
        match self.next() {
            Some(Tok::Not) => Ok(Condition::Not(Box::new(self.unary()?))),
            Some(Tok::LParen) => {
                let inner = self.or()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(bad("missing )".into())),
                }
            }
            Some(Tok::Ident(attr)) => {
                let op = match self.next() {
                    Some(Tok::Op(op)) => op,
                    other => return Err(bad(format!("expected operator after {attr}, got {}", shown(other.as_ref())))),
                };
                let literal = match self.next() {
                    Some(Tok::Lit(l)) => l,
                    other => return Err(bad(format!("expected literal, got {}", shown(other.as_ref())))),
                };
                Ok(Condition::Term(Term { attr, op, literal }))
            }
            other => Err(bad(format!("unexpected {}", shown(other.as_ref())))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<AttributeDef> {
        vec![
            AttributeDef::new("run", AttrType::Int).unwrap(),
            AttributeDef::new("energy", AttrType::Float).unwrap(),
            AttributeDef::new("tag", AttrType::Str).unwrap(),
            AttributeDef::new("ts", AttrType::Timestamp).unwrap(),
        ]
    }

    #[test]
    fn empty_is_true() {
        assert_eq!(Condition::parse("").unwrap(), Condition::True);
        assert_eq!(Condition::parse("   ").unwrap(), Condition::True);
        assert!(Condition::True.eval(&[], &[]));
    }

    #[test]
    fn precedence_and_binds_tighter() {
        let c = Condition::parse("run = 1 OR run = 2 AND tag = 'x'").unwrap();
        match c {
            Condition::Or(_, rhs) => assert!(matches!(*rhs, Condition::And(..))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_checking() {
        let s = schema();
        assert!(Condition::parse("run > 3").unwrap().check(&s).is_ok());
        assert!(Condition::parse("energy >= 2").unwrap().check(&s).is_ok());
        assert!(Condition::parse("tag like 'a%'").unwrap().check(&s).is_ok());
        assert!(Condition::parse("ts < 1700000000").unwrap().check(&s).is_ok());
        for bad in ["missing = 1", "run = 'x'", "run like '1'", "tag = 3", "run = 1.5"] {
            assert!(
                matches!(Condition::parse(bad).unwrap().check(&s), Err(Error::BadCondition(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn malformed_conditions() {
        for bad in ["run >", "run 3", "(run = 1", "tag = 'abc", "run = 1 AND", "run ~ 1", "= 1"] {
            assert!(matches!(Condition::parse(bad), Err(Error::BadCondition(_))), "{bad}");
        }
    }

    #[test]
    fn null_fails_every_term() {
        let s = schema();
        let vals = vec![Value::Null, Value::Null, Value::Null, Value::Null];
        for text in ["run = 1", "run != 1", "energy < 1", "tag like '%'", "ts >= 0"] {
            assert!(!Condition::parse(text).unwrap().eval(&s, &vals), "{text}");
        }
        assert!(Condition::parse("NOT run = 1").unwrap().eval(&s, &vals));
    }

    #[test]
    fn like_wildcards() {
        assert!(like("abc", "a%"));
        assert!(like("abc", "%c"));
        assert!(like("abc", "%b%"));
        assert!(like("abc", "abc"));
        assert!(like("", "%"));
        assert!(like("a%c", "a%c"));
        assert!(!like("abc", "a%d"));
        assert!(!like("abc", "ab"));
        assert!(like("aaab", "%a%ab"));
    }

    #[test]
    fn quoted_literal_escape() {
        let c = Condition::parse("tag = 'it''s'").unwrap();
        let s = schema();
        let vals = vec![Value::Null, Value::Null, Value::Str("it's".into()), Value::Null];
        assert!(c.eval(&s, &vals));
        assert_eq!(Condition::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn display_reparses() {
        for text in ["run > 3 AND NOT (tag like 'x%' OR energy <= -1.5)", "ts != 5", "NOT NOT run = 0"] {
            let c = Condition::parse(text).unwrap();
            assert_eq!(Condition::parse(&c.to_string()).unwrap(), c, "{text}");
        }
    }
}
