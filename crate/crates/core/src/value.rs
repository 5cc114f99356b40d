use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::valid_name;

/// Token that stands for a missing value on the wire.
pub const NULL_TOKEN: &str = "NULL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttrType {
    Int,
    Float,
    Str,
    /// Seconds since the Unix epoch.
    Timestamp,
}

impl AttrType {
    pub fn as_str(self) -> &'static str {
        match self {
            AttrType::Int => "INT",
            AttrType::Float => "FLOAT",
            AttrType::Str => "STRING",
            AttrType::Timestamp => "TIMESTAMP",
        }
    }
}

impl fmt::Display for AttrType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttrType {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttrType> {
        match s {
            "INT" => Ok(AttrType::Int),
            "FLOAT" => Ok(AttrType::Float),
            "STRING" => Ok(AttrType::Str),
            "TIMESTAMP" => Ok(AttrType::Timestamp),
            _ => Err(Error::BadArguments(format!("unknown type {s}"))),
        }
    }
}

/// A typed column of a directory schema. Wire form is `name:TYPE`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub ty: AttrType,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, ty: AttrType) -> Result<AttributeDef> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(Error::BadName);
        }
        Ok(AttributeDef { name, ty })
    }
}

impl fmt::Display for AttributeDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.ty)
    }
}

impl FromStr for AttributeDef {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttributeDef> {
        let (name, ty) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::BadArguments(format!("expected name:TYPE, got {s}")))?;
        AttributeDef::new(name, ty.parse()?)
    }
}

/// A stored attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Str(String),
    Timestamp(i64),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Checks that a value may be stored under `ty`.
    pub fn conforms(&self, ty: AttrType) -> bool {
        match (self, ty) {
            (Value::Null, _) => true,
            (Value::Int(_), AttrType::Int) => true,
            (Value::Float(f), AttrType::Float) => f.is_finite(),
            (Value::Str(s), AttrType::Str) => !s.contains(['\n', '\r']),
            (Value::Timestamp(_), AttrType::Timestamp) => true,
            _ => false,
        }
    }

    /// Parses a wire token under the declared attribute type.
    ///
    /// `NULL` is the missing value for every type. String values that would
    /// collide with it (or that begin with a backslash) carry one extra
    /// leading backslash, which [`Value::to_token`] adds and this strips.
    pub fn parse_token(token: &str, ty: AttrType) -> Result<Value> {
        if token == NULL_TOKEN {
            return Ok(Value::Null);
        }
        let v = match ty {
            AttrType::Int => Value::Int(token.parse().map_err(|_| Error::TypeMismatch)?),
            AttrType::Timestamp => Value::Timestamp(token.parse().map_err(|_| Error::TypeMismatch)?),
            AttrType::Float => {
                let f: f64 = token.parse().map_err(|_| Error::TypeMismatch)?;
                if !f.is_finite() {
                    return Err(Error::TypeMismatch);
                }
                Value::Float(f)
            }
            AttrType::Str => Value::Str(token.strip_prefix('\\').unwrap_or(token).to_string()),
        };
        if !v.conforms(ty) {
            return Err(Error::TypeMismatch);
        }
        Ok(v)
    }

    pub fn to_token(&self) -> String {
        match self {
            Value::Null => NULL_TOKEN.to_string(),
            Value::Int(i) | Value::Timestamp(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
            Value::Str(s) => {
                if s == NULL_TOKEN || s.starts_with('\\') {
                    format!("\\{s}")
                } else {
                    s.clone()
                }
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_token())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn attribute_def_text_form() {
        let def: AttributeDef = "run:INT".parse().unwrap();
        assert_eq!(def, AttributeDef::new("run", AttrType::Int).unwrap());
        assert_eq!(def.to_string(), "run:INT");
        assert!("run".parse::<AttributeDef>().is_err());
        assert!("run:DOUBLE".parse::<AttributeDef>().is_err());
        assert_eq!("bad name:INT".parse::<AttributeDef>(), Err(Error::BadName));
    }

    #[test]
    fn typed_parsing() {
        assert_eq!(Value::parse_token("42", AttrType::Int), Ok(Value::Int(42)));
        assert_eq!(Value::parse_token("abc", AttrType::Int), Err(Error::TypeMismatch));
        assert_eq!(Value::parse_token("1.5", AttrType::Int), Err(Error::TypeMismatch));
        assert_eq!(Value::parse_token("2", AttrType::Float), Ok(Value::Float(2.0)));
        assert_eq!(Value::parse_token("inf", AttrType::Float), Err(Error::TypeMismatch));
        assert_eq!(Value::parse_token("NULL", AttrType::Str), Ok(Value::Null));
        assert_eq!(Value::parse_token("\\NULL", AttrType::Str), Ok(Value::Str("NULL".into())));
        assert_eq!(Value::parse_token("1700000000", AttrType::Timestamp), Ok(Value::Timestamp(1_700_000_000)));
    }

    #[test]
    fn string_escaping_is_unambiguous() {
        for s in ["NULL", "\\", "\\NULL", "plain", "", "with space"] {
            let v = Value::Str(s.to_string());
            assert_eq!(Value::parse_token(&v.to_token(), AttrType::Str), Ok(v));
        }
    }

    proptest! {
        #[test]
        fn float_tokens_round_trip(f in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let v = Value::Float(f);
            prop_assert_eq!(Value::parse_token(&v.to_token(), AttrType::Float), Ok(v));
        }
    }
}
