//! Shared test support: the automaton oracle, a seeded random policy
//! generator, and trace enumeration helpers.

#![allow(dead_code)]

pub mod automaton;
pub mod rdp_oracle;
pub mod scalar_sgd;

use polifed::policy::{CommandInvocation, Policy};
use rand::Rng;

/// The four-command alphabet used by randomized policy tests.
pub const ALPHABET: [&str; 4] = ["a", "b", "c", "d"];

/// Generates a random policy of depth at most `depth` over `alphabet`,
/// exercising every connective (sequence, union, intersection, negation,
/// star) plus the `0`/`1` literals and bare commands.
pub fn random_policy(rng: &mut impl Rng, alphabet: &[&str], depth: usize) -> Policy {
    if depth == 0 {
        return match rng.gen_range(0..8) {
            0 => Policy::Zero,
            1 => Policy::One,
            _ => Policy::cmd(alphabet[rng.gen_range(0..alphabet.len())]),
        };
    }
    match rng.gen_range(0..20) {
        0 => Policy::Zero,
        1 => Policy::One,
        2..=6 => Policy::cmd(alphabet[rng.gen_range(0..alphabet.len())]),
        7..=10 => Policy::Seq(
            Box::new(random_policy(rng, alphabet, depth - 1)),
            Box::new(random_policy(rng, alphabet, depth - 1)),
        ),
        11..=14 => Policy::Union(
            Box::new(random_policy(rng, alphabet, depth - 1)),
            Box::new(random_policy(rng, alphabet, depth - 1)),
        ),
        15..=16 => Policy::Intersect(
            Box::new(random_policy(rng, alphabet, depth - 1)),
            Box::new(random_policy(rng, alphabet, depth - 1)),
        ),
        17 => Policy::Neg(Box::new(random_policy(rng, alphabet, depth - 1))),
        _ => Policy::Star(Box::new(random_policy(rng, alphabet, depth - 1))),
    }
}

/// A random trace of bare commands over `alphabet`, length in `0..=max_len`.
pub fn random_trace(rng: &mut impl Rng, alphabet: &[&str], max_len: usize) -> Vec<usize> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen_range(0..alphabet.len())).collect()
}

/// Turns symbol indices into command invocations.
pub fn trace_invocations(trace: &[usize], alphabet: &[&str]) -> Vec<CommandInvocation> {
    trace
        .iter()
        .map(|&sym| CommandInvocation::bare(alphabet[sym]))
        .collect()
}

/// Compares the derivative engine against the oracle DFA on every trace of
/// length at most `max_len`, walking the shared prefix tree so each trace
/// extension costs one derivative and one DFA step. Returns the number of
/// traces checked; panics on the first disagreement.
pub fn check_all_traces(policy: &Policy, alphabet: &[&str], max_len: usize) -> usize {
    let dfa = automaton::dfa_of(policy, alphabet);
    let invocations: Vec<CommandInvocation> = alphabet
        .iter()
        .map(|name| CommandInvocation::bare(*name))
        .collect();
    let reduced = policy.reduce();
    fn recurse(
        policy: &Policy,
        dfa: &automaton::Dfa,
        state: usize,
        invocations: &[CommandInvocation],
        depth_left: usize,
        prefix: &mut Vec<usize>,
        checked: &mut usize,
    ) {
        let engine = policy.accepts_empty();
        let oracle = dfa.is_accepting(state);
        assert_eq!(
            engine, oracle,
            "derivative engine and automaton oracle disagree on trace {prefix:?}"
        );
        *checked += 1;
        if depth_left == 0 {
            return;
        }
        for (sym, inv) in invocations.iter().enumerate() {
            prefix.push(sym);
            let next_policy = policy.derive(inv);
            let next_state = dfa.step(state, sym);
            recurse(
                &next_policy,
                dfa,
                next_state,
                invocations,
                depth_left - 1,
                prefix,
                checked,
            );
            prefix.pop();
        }
    }
    let mut checked = 0;
    let mut prefix = Vec::new();
    recurse(
        &reduced,
        &dfa,
        dfa.start(),
        &invocations,
        max_len,
        &mut prefix,
        &mut checked,
    );
    checked
}
