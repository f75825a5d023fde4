//! Policy macros.
//!
//! A macro is a named policy template; expansion replaces every bare command
//! node whose name is a macro key with the template. Expansion is single-level
//! (templates contain no macro names) and happens once, at policy load time on
//! the coordinator, so edge-side enforcement only ever sees expanded policies.

use std::collections::BTreeMap;

use super::{parse_policy, Policy};

/// Errors from macro definition or expansion.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MacroError {
    #[error("unknown macro `{0}`")]
    Unknown(String),
    #[error("macro `{0}` takes no parameters")]
    TakesNoParams(String),
}

/// Named policy templates.
#[derive(Debug, Clone, Default)]
pub struct MacroTable {
    templates: BTreeMap<String, Policy>,
}

/// The default `runFL` expansion: one training pass, any number of
/// accumulations, then any number of further train/accumulate/average rounds.
/// Both the plain and the differentially private training commands are
/// admitted, so one umbrella name covers both training methods; the loop is
/// closed with a Kleene star so a model produced by `average` may keep
/// participating in later rounds.
pub const RUN_FL_BODY: &str = "(train_local + train_local_dp) . accumulate* . \
     ((train_local + train_local_dp) . accumulate* + average*)*";

impl MacroTable {
    /// An empty table.
    pub fn empty() -> Self {
        MacroTable::default()
    }

    /// The default table, currently containing only `runFL`.
    pub fn with_defaults() -> Self {
        let mut t = MacroTable::default();
        t.define("runFL", parse_policy(RUN_FL_BODY).expect("default macro body parses"));
        t
    }

    /// Defines (or replaces) a macro.
    pub fn define(&mut self, name: impl Into<String>, template: Policy) {
        self.templates.insert(name.into(), template);
    }

    /// Looks up a template by name.
    pub fn template(&self, name: &str) -> Result<&Policy, MacroError> {
        self.templates
            .get(name)
            .ok_or_else(|| MacroError::Unknown(name.to_owned()))
    }

    /// True iff `name` is a defined macro.
    pub fn contains(&self, name: &str) -> bool {
        self.templates.contains_key(name)
    }

    /// Replaces every command node whose name is a macro key with the
    /// template. Non-macro nodes are unchanged. A macro invoked with
    /// parameters is an error: templates are not parameterized.
    pub fn expand(&self, p: &Policy) -> Result<Policy, MacroError> {
        Ok(match p {
            Policy::Cmd(pat) if self.templates.contains_key(&pat.name) => {
                if !pat.params.is_empty() {
                    return Err(MacroError::TakesNoParams(pat.name.clone()));
                }
                self.templates[&pat.name].clone()
            }
            Policy::Zero | Policy::One | Policy::Cmd(_) => p.clone(),
            Policy::Seq(a, b) => Policy::Seq(Box::new(self.expand(a)?), Box::new(self.expand(b)?)),
            Policy::Union(a, b) => {
                Policy::Union(Box::new(self.expand(a)?), Box::new(self.expand(b)?))
            }
            Policy::Intersect(a, b) => {
                Policy::Intersect(Box::new(self.expand(a)?), Box::new(self.expand(b)?))
            }
            Policy::Neg(a) => Policy::Neg(Box::new(self.expand(a)?)),
            Policy::Star(a) => Policy::Star(Box::new(self.expand(a)?)),
        })
    }
}
