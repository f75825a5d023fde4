//! Commands and their parameters.
//!
//! A policy constrains commands through [`CommandPattern`]s; at runtime the
//! executed step is a [`CommandInvocation`]. Pattern params are constraints:
//! every key the pattern names must be present in the invocation with an
//! exactly equal value, while invocation args the pattern does not mention are
//! wildcards. List values compare as sets and are stored sorted and deduplicated
//! so that structural equality is set equality.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A single literal parameter value.
///
/// Floats order and compare by `f64::total_cmp`, so literal equality is exact
/// (`1` and `1.0` are distinct literals: one is [`Literal::Int`], the other
/// [`Literal::Float`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl PartialEq for Literal {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Literal::Bool(a), Literal::Bool(b)) => a == b,
            (Literal::Int(a), Literal::Int(b)) => a == b,
            (Literal::Float(a), Literal::Float(b)) => a.total_cmp(b) == std::cmp::Ordering::Equal,
            (Literal::Str(a), Literal::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Literal {}

impl PartialOrd for Literal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Literal {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use Literal::*;
        fn rank(l: &Literal) -> u8 {
            match l {
                Bool(_) => 0,
                Int(_) => 1,
                Float(_) => 2,
                Str(_) => 3,
            }
        }
        match (self, other) {
            (Bool(a), Bool(b)) => a.cmp(b),
            (Int(a), Int(b)) => a.cmp(b),
            (Float(a), Float(b)) => a.total_cmp(b),
            (Str(a), Str(b)) => a.cmp(b),
            (a, b) => rank(a).cmp(&rank(b)),
        }
    }
}

impl std::hash::Hash for Literal {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        match self {
            Literal::Bool(b) => (0u8, b).hash(state),
            Literal::Int(i) => (1u8, i).hash(state),
            Literal::Float(f) => (2u8, f.to_bits()).hash(state),
            Literal::Str(s) => (3u8, s).hash(state),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Int(i) => write!(f, "{i}"),
            // Keep a trailing ".0" so the float re-parses as a float.
            Literal::Float(x) => {
                if x.fract() == 0.0 && x.is_finite() && x.abs() < 1e15 {
                    write!(f, "{x:.1}")
                } else {
                    write!(f, "{x}")
                }
            }
            Literal::Str(s) => {
                write!(f, "\"")?;
                for c in s.chars() {
                    match c {
                        '"' => write!(f, "\\\"")?,
                        '\\' => write!(f, "\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                write!(f, "\"")
            }
        }
    }
}

impl From<&str> for Literal {
    fn from(s: &str) -> Self {
        Literal::Str(s.to_owned())
    }
}

impl From<i64> for Literal {
    fn from(i: i64) -> Self {
        Literal::Int(i)
    }
}

impl From<f64> for Literal {
    fn from(x: f64) -> Self {
        Literal::Float(x)
    }
}

impl From<bool> for Literal {
    fn from(b: bool) -> Self {
        Literal::Bool(b)
    }
}

/// A parameter value: a single literal or a list of literals.
///
/// Lists are kept sorted and deduplicated (see [`Value::normalize`]), making
/// derived equality the set equality the matching rules call for.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Lit(Literal),
    List(Vec<Literal>),
}

impl Value {
    /// Sorts and deduplicates list values; single literals are untouched.
    pub fn normalize(&mut self) {
        if let Value::List(items) = self {
            items.sort();
            items.dedup();
        }
    }

    /// Returns the normalized form of `self`.
    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Lit(l) => write!(f, "{l}"),
            Value::List(items) => {
                write!(f, "[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, "]")
            }
        }
    }
}

impl<T: Into<Literal>> From<T> for Value {
    fn from(v: T) -> Self {
        Value::Lit(v.into())
    }
}

/// A command constraint inside a policy: a name plus parameter constraints.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CommandPattern {
    pub name: String,
    /// Keyed constraints; `BTreeMap` keeps keys unique and ordered.
    pub params: BTreeMap<String, Value>,
}

impl CommandPattern {
    /// A bare pattern with no parameter constraints.
    pub fn bare(name: impl Into<String>) -> Self {
        CommandPattern {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    /// Adds one parameter constraint (builder style).
    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into().normalized());
        self
    }

    /// True iff the invocation's name equals this pattern's name and every
    /// param constraint is satisfied with exact literal equality (lists as
    /// sets). Invocation args the pattern does not mention are wildcards.
    pub fn matches(&self, inv: &CommandInvocation) -> bool {
        if self.name != inv.name {
            return false;
        }
        self.params
            .iter()
            .all(|(key, want)| inv.args.get(key) == Some(want))
    }
}

impl fmt::Display for CommandPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        if !self.params.is_empty() {
            write!(f, "(")?;
            for (i, (key, value)) in self.params.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{key}={value}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

/// A command as actually executed: a name plus the args supplied at runtime.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandInvocation {
    pub name: String,
    pub args: BTreeMap<String, Value>,
}

impl CommandInvocation {
    /// An invocation with no args.
    pub fn bare(name: impl Into<String>) -> Self {
        CommandInvocation {
            name: name.into(),
            args: BTreeMap::new(),
        }
    }

    /// Adds one arg (builder style).
    pub fn with_arg(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.args.insert(key.into(), value.into().normalized());
        self
    }

    /// Normalizes all arg values in place (lists sorted and deduplicated).
    pub fn normalize(&mut self) {
        for value in self.args.values_mut() {
            value.normalize();
        }
    }
}

impl fmt::Display for CommandInvocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        if !self.args.is_empty() {
            write!(f, "(")?;
            for (i, (key, value)) in self.args.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{key}={value}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}
