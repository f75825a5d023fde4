//! Use-based privacy policies: regular expressions over parameterized
//! commands, advanced by Brzozowski derivatives.
//!
//! A [`Policy`] denotes a set of command traces. Executing a command rewrites
//! the policy to its derivative: the policy of everything still allowed
//! afterwards. A trace is accepted when the folded derivative accepts the
//! empty trace. The derivative of an unauthorized command is [`Policy::Zero`],
//! which accepts nothing, so enforcement is a structural check at each step.
//!
//! Key invariants:
//!
//! - [`Policy::reduce`] canonicalizes: `Seq` chains are right-associated with
//!   `Zero`/`One` eliminated, `Union`/`Intersect` operands are flattened,
//!   sorted, and deduplicated with identity/annihilator elements removed,
//!   `Star(Star(p))` collapses, and `Neg(Neg(p))` cancels. Reduction preserves
//!   the trace language and never increases node count.
//! - [`Policy::derive`] expects a reduced policy and returns a reduced one.
//!   Canonical forms keep repeated derivation from growing without bound.

mod command;
mod macros;
mod parser;

use std::collections::BTreeSet;

pub use command::{CommandInvocation, CommandPattern, Literal, Value};
pub use macros::{MacroError, MacroTable};
pub use parser::{parse_policy, ParseError};

/// A policy AST node. The trace language is regular: `Zero` accepts nothing,
/// `One` accepts only the empty trace, `Cmd` accepts exactly the one-command
/// traces matching its pattern, and the connectives are sequencing, union,
/// intersection, complement, and Kleene star.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Zero,
    One,
    Cmd(CommandPattern),
    Seq(Box<Policy>, Box<Policy>),
    Union(Box<Policy>, Box<Policy>),
    Intersect(Box<Policy>, Box<Policy>),
    Neg(Box<Policy>),
    Star(Box<Policy>),
}

impl Policy {
    /// A command atom with no parameter constraints.
    pub fn cmd(name: &str) -> Policy {
        Policy::Cmd(CommandPattern::bare(name))
    }

    /// Number of AST nodes.
    pub fn node_count(&self) -> usize {
        match self {
            Policy::Zero | Policy::One | Policy::Cmd(_) => 1,
            Policy::Seq(a, b) | Policy::Union(a, b) | Policy::Intersect(a, b) => {
                1 + a.node_count() + b.node_count()
            }
            Policy::Neg(a) | Policy::Star(a) => 1 + a.node_count(),
        }
    }

    /// True iff the policy accepts the empty trace (the nullability check):
    /// `Zero` and `Cmd` do not, `One` and `Star` do, `Seq`/`Intersect` need
    /// both sides, `Union` needs either, and `Neg` flips its operand.
    pub fn accepts_empty(&self) -> bool {
        match self {
            Policy::Zero | Policy::Cmd(_) => false,
            Policy::One | Policy::Star(_) => true,
            Policy::Seq(a, b) | Policy::Intersect(a, b) => a.accepts_empty() && b.accepts_empty(),
            Policy::Union(a, b) => a.accepts_empty() || b.accepts_empty(),
            Policy::Neg(a) => !a.accepts_empty(),
        }
    }

    /// The Brzozowski derivative by `c`, reduced.
    ///
    /// Expects `self` to be reduced; the result is then reduced as well
    /// because every rule composes sub-derivatives through the canonicalizing
    /// constructors. The rules:
    ///
    /// - `D(0, c) = D(1, c) = 0`
    /// - `D(C, c) = 1` if `C` matches `c`, else `0`
    /// - `D(p.q, c) = D(p, c).q + D(q, c)` with the second term present only
    ///   when `p` accepts the empty trace
    /// - `D(p + q, c) = D(p, c) + D(q, c)`
    /// - `D(p & q, c) = D(p, c) & D(q, c)`
    /// - `D(p*, c) = D(p, c).p*`
    /// - `D(!p, c) = !D(p, c)`
    pub fn derive(&self, c: &CommandInvocation) -> Policy {
        match self {
            Policy::Zero | Policy::One => Policy::Zero,
            Policy::Cmd(pat) => {
                if pat.matches(c) {
                    Policy::One
                } else {
                    Policy::Zero
                }
            }
            Policy::Seq(a, b) => {
                let left = seq2(a.derive(c), (**b).clone());
                if a.accepts_empty() {
                    union2(left, b.derive(c))
                } else {
                    left
                }
            }
            Policy::Union(a, b) => union2(a.derive(c), b.derive(c)),
            Policy::Intersect(a, b) => intersect2(a.derive(c), b.derive(c)),
            Policy::Star(a) => seq2(a.derive(c), self.clone()),
            Policy::Neg(a) => neg1(a.derive(c)),
        }
    }

    /// Canonicalizes the policy; the result accepts exactly the same traces
    /// and its node count never exceeds the input's.
    pub fn reduce(&self) -> Policy {
        match self {
            Policy::Zero | Policy::One | Policy::Cmd(_) => self.clone(),
            Policy::Seq(a, b) => seq2(a.reduce(), b.reduce()),
            Policy::Union(a, b) => union2(a.reduce(), b.reduce()),
            Policy::Intersect(a, b) => intersect2(a.reduce(), b.reduce()),
            Policy::Star(a) => star1(a.reduce()),
            Policy::Neg(a) => neg1(a.reduce()),
        }
    }

    /// Canonical `self & other`. Both sides must already be reduced, as
    /// [`Policy::derive`] and [`Policy::reduce`] return them.
    pub fn intersect(self, other: Policy) -> Policy {
        intersect2(self, other)
    }

    /// Folds [`Policy::derive`] over the trace and reports whether the
    /// residual accepts the empty trace.
    pub fn accepts_trace(&self, trace: &[CommandInvocation]) -> bool {
        let mut cur = self.reduce();
        for c in trace {
            cur = cur.derive(c);
        }
        cur.accepts_empty()
    }
}

/// Builds `Seq(a, b)` canonically from reduced operands: `Zero` annihilates,
/// `One` drops out, and the chain is right-associated.
fn seq2(a: Policy, b: Policy) -> Policy {
    if a == Policy::Zero || b == Policy::Zero {
        return Policy::Zero;
    }
    let mut parts = Vec::new();
    flatten_seq(a, &mut parts);
    flatten_seq(b, &mut parts);
    parts.retain(|p| *p != Policy::One);
    let mut iter = parts.into_iter().rev();
    match iter.next() {
        None => Policy::One,
        Some(last) => iter.fold(last, |acc, p| Policy::Seq(Box::new(p), Box::new(acc))),
    }
}

fn flatten_seq(p: Policy, out: &mut Vec<Policy>) {
    match p {
        Policy::Seq(x, y) => {
            flatten_seq(*x, out);
            flatten_seq(*y, out);
        }
        other => out.push(other),
    }
}

/// Builds `Union(a, b)` canonically from reduced operands: operands are
/// flattened, sorted, deduplicated, and `Zero` is dropped.
fn union2(a: Policy, b: Policy) -> Policy {
    let mut set = BTreeSet::new();
    flatten_union(a, &mut set);
    flatten_union(b, &mut set);
    set.remove(&Policy::Zero);
    fold_sorted(set, Policy::Zero, |l, r| {
        Policy::Union(Box::new(l), Box::new(r))
    })
}

fn flatten_union(p: Policy, out: &mut BTreeSet<Policy>) {
    match p {
        Policy::Union(x, y) => {
            flatten_union(*x, out);
            flatten_union(*y, out);
        }
        other => {
            out.insert(other);
        }
    }
}

/// Builds `Intersect(a, b)` canonically from reduced operands: operands are
/// flattened, sorted, deduplicated, and `Zero` annihilates.
fn intersect2(a: Policy, b: Policy) -> Policy {
    let mut set = BTreeSet::new();
    flatten_intersect(a, &mut set);
    flatten_intersect(b, &mut set);
    if set.contains(&Policy::Zero) {
        return Policy::Zero;
    }
    fold_sorted(set, Policy::Zero, |l, r| {
        Policy::Intersect(Box::new(l), Box::new(r))
    })
}

fn flatten_intersect(p: Policy, out: &mut BTreeSet<Policy>) {
    match p {
        Policy::Intersect(x, y) => {
            flatten_intersect(*x, out);
            flatten_intersect(*y, out);
        }
        other => {
            out.insert(other);
        }
    }
}

/// Right-folds a sorted operand set into a chain, returning `empty` for zero
/// operands and the operand itself for one.
fn fold_sorted(
    set: BTreeSet<Policy>,
    empty: Policy,
    join: impl Fn(Policy, Policy) -> Policy,
) -> Policy {
    let mut iter = set.into_iter().rev();
    match iter.next() {
        None => empty,
        Some(last) => iter.fold(last, |acc, p| join(p, acc)),
    }
}

/// Builds `Star(a)` canonically from a reduced operand: `0*` and `1*` are
/// `One`, and nested stars collapse.
fn star1(a: Policy) -> Policy {
    match a {
        Policy::Zero | Policy::One => Policy::One,
        Policy::Star(_) => a,
        other => Policy::Star(Box::new(other)),
    }
}

/// Builds `Neg(a)` canonically from a reduced operand: double negation
/// cancels.
fn neg1(a: Policy) -> Policy {
    match a {
        Policy::Neg(inner) => *inner,
        other => Policy::Neg(Box::new(other)),
    }
}

impl serde::Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_policy(&text).map_err(serde::de::Error::custom)
    }
}
