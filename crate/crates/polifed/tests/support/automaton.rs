//! Independent automaton oracle for policy acceptance.
//!
//! Builds a complete DFA for a policy over a fixed finite alphabet of bare
//! command names, entirely without the derivative engine: Thompson
//! construction for `Zero`/`One`/`Cmd`/`Seq`/`Union`/`Star`, subset-construction
//! determinization, product construction for `Intersect`, and complement of
//! the (complete) determinized automaton for `Neg`. Trace acceptance is then a
//! DFA walk. Any disagreement with `Policy::accepts_trace` is a bug in one of
//! the two routes.

use std::collections::{BTreeSet, HashMap, VecDeque};

use polifed::policy::Policy;

/// Epsilon-NFA over symbols `0..n_symbols`.
struct Nfa {
    n_symbols: usize,
    start: usize,
    /// eps[s] = states reachable from s by one epsilon edge.
    eps: Vec<Vec<usize>>,
    /// step[s][a] = states reachable from s by symbol a.
    step: Vec<Vec<Vec<usize>>>,
    accept: Vec<bool>,
}

impl Nfa {
    fn new(n_states: usize, n_symbols: usize, start: usize) -> Self {
        Nfa {
            n_symbols,
            start,
            eps: vec![Vec::new(); n_states],
            step: vec![vec![Vec::new(); n_symbols]; n_states],
            accept: vec![false; n_states],
        }
    }

    fn zero(n_symbols: usize) -> Self {
        Nfa::new(1, n_symbols, 0)
    }

    fn one(n_symbols: usize) -> Self {
        let mut n = Nfa::new(1, n_symbols, 0);
        n.accept[0] = true;
        n
    }

    fn symbol(n_symbols: usize, sym: usize) -> Self {
        let mut n = Nfa::new(2, n_symbols, 0);
        n.step[0][sym].push(1);
        n.accept[1] = true;
        n
    }

    /// Copies `other`'s states into `self`, returning the index offset.
    fn absorb(&mut self, other: &Nfa) -> usize {
        let offset = self.eps.len();
        for eps in &other.eps {
            self.eps.push(eps.iter().map(|t| t + offset).collect());
        }
        for step in &other.step {
            self.step.push(
                step.iter()
                    .map(|targets| targets.iter().map(|t| t + offset).collect())
                    .collect(),
            );
        }
        self.accept.extend_from_slice(&other.accept);
        offset
    }

    fn concat(a: &Nfa, b: &Nfa) -> Nfa {
        let mut n = Nfa::new(0, a.n_symbols, 0);
        let oa = n.absorb(a);
        let ob = n.absorb(b);
        n.start = a.start + oa;
        for s in 0..a.accept.len() {
            if a.accept[s] {
                n.accept[s + oa] = false;
                n.eps[s + oa].push(b.start + ob);
            }
        }
        n
    }

    fn union(a: &Nfa, b: &Nfa) -> Nfa {
        let mut n = Nfa::new(1, a.n_symbols, 0);
        let oa = n.absorb(a);
        let ob = n.absorb(b);
        n.eps[0].push(a.start + oa);
        n.eps[0].push(b.start + ob);
        n
    }

    fn star(a: &Nfa) -> Nfa {
        let mut n = Nfa::new(1, a.n_symbols, 0);
        let oa = n.absorb(a);
        n.accept[0] = true;
        n.eps[0].push(a.start + oa);
        for s in 0..a.accept.len() {
            if a.accept[s] {
                n.eps[s + oa].push(0);
                n.accept[s + oa] = false;
            }
        }
        n
    }

    fn eps_closure(&self, set: &mut BTreeSet<usize>) {
        let mut queue: VecDeque<usize> = set.iter().copied().collect();
        while let Some(s) = queue.pop_front() {
            for &t in &self.eps[s] {
                if set.insert(t) {
                    queue.push_back(t);
                }
            }
        }
    }
}

/// Complete DFA: every state has a transition on every symbol.
pub struct Dfa {
    n_symbols: usize,
    start: usize,
    trans: Vec<Vec<usize>>,
    accept: Vec<bool>,
}

/// Intermediate automata are minimized at every construction level; without
/// this, stacked determinizations on nested complements blow up.
const MAX_DFA_STATES: usize = 1 << 20;

impl Dfa {
    fn determinize(nfa: &Nfa) -> Dfa {
        let mut start_set = BTreeSet::new();
        start_set.insert(nfa.start);
        nfa.eps_closure(&mut start_set);

        let mut index: HashMap<BTreeSet<usize>, usize> = HashMap::new();
        let mut sets: Vec<BTreeSet<usize>> = Vec::new();
        let mut trans: Vec<Vec<usize>> = Vec::new();
        index.insert(start_set.clone(), 0);
        sets.push(start_set);
        trans.push(vec![usize::MAX; nfa.n_symbols]);

        let mut frontier = VecDeque::new();
        frontier.push_back(0usize);
        while let Some(i) = frontier.pop_front() {
            for sym in 0..nfa.n_symbols {
                let mut next = BTreeSet::new();
                for &s in &sets[i] {
                    next.extend(nfa.step[s][sym].iter().copied());
                }
                nfa.eps_closure(&mut next);
                let j = *index.entry(next.clone()).or_insert_with(|| {
                    sets.push(next);
                    trans.push(vec![usize::MAX; nfa.n_symbols]);
                    frontier.push_back(trans.len() - 1);
                    trans.len() - 1
                });
                trans[i][sym] = j;
            }
            assert!(
                trans.len() <= MAX_DFA_STATES,
                "oracle determinization exceeded {MAX_DFA_STATES} states"
            );
        }
        let accept = sets
            .iter()
            .map(|set| set.iter().any(|&s| nfa.accept[s]))
            .collect();
        Dfa {
            n_symbols: nfa.n_symbols,
            start: 0,
            trans,
            accept,
        }
    }

    fn complement(mut self) -> Dfa {
        for a in &mut self.accept {
            *a = !*a;
        }
        self
    }

    /// Moore partition-refinement minimization. All states are reachable by
    /// construction, so only language-equivalent states need merging.
    fn minimize(self) -> Dfa {
        let n = self.trans.len();
        let mut part: Vec<usize> = self.accept.iter().map(|&a| a as usize).collect();
        let mut n_parts = 2;
        loop {
            let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
            let mut next = vec![0usize; n];
            for s in 0..n {
                let mut sig = Vec::with_capacity(self.n_symbols + 1);
                sig.push(part[s]);
                for sym in 0..self.n_symbols {
                    sig.push(part[self.trans[s][sym]]);
                }
                let fresh = index.len();
                next[s] = *index.entry(sig).or_insert(fresh);
            }
            let new_parts = index.len();
            part = next;
            if new_parts == n_parts {
                break;
            }
            n_parts = new_parts;
        }
        let mut trans = vec![vec![usize::MAX; self.n_symbols]; n_parts];
        let mut accept = vec![false; n_parts];
        for s in 0..n {
            let p = part[s];
            accept[p] = self.accept[s];
            for sym in 0..self.n_symbols {
                trans[p][sym] = part[self.trans[s][sym]];
            }
        }
        Dfa {
            n_symbols: self.n_symbols,
            start: part[self.start],
            trans,
            accept,
        }
    }

    fn product(a: &Dfa, b: &Dfa, both: impl Fn(bool, bool) -> bool) -> Dfa {
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs = vec![(a.start, b.start)];
        index.insert((a.start, b.start), 0);
        let mut trans: Vec<Vec<usize>> = vec![vec![usize::MAX; a.n_symbols]];
        let mut i = 0;
        while i < pairs.len() {
            let (sa, sb) = pairs[i];
            for sym in 0..a.n_symbols {
                let pair = (a.trans[sa][sym], b.trans[sb][sym]);
                let j = *index.entry(pair).or_insert_with(|| {
                    pairs.push(pair);
                    trans.push(vec![usize::MAX; a.n_symbols]);
                    pairs.len() - 1
                });
                trans[i][sym] = j;
            }
            i += 1;
        }
        let accept = pairs
            .iter()
            .map(|&(sa, sb)| both(a.accept[sa], b.accept[sb]))
            .collect();
        Dfa {
            n_symbols: a.n_symbols,
            start: 0,
            trans,
            accept,
        }
    }

    /// Walks the DFA over a trace of symbol indices.
    pub fn accepts(&self, trace: &[usize]) -> bool {
        let mut s = self.start;
        for &sym in trace {
            s = self.trans[s][sym];
        }
        self.accept[s]
    }

    /// Steps one symbol from `state`, returning the successor state.
    pub fn step(&self, state: usize, sym: usize) -> usize {
        self.trans[state][sym]
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.accept[state]
    }
}

/// Builds the oracle DFA for `p` over `alphabet`. `p` must use only bare
/// (parameterless) commands whose names are in the alphabet.
pub fn dfa_of(p: &Policy, alphabet: &[&str]) -> Dfa {
    fn build(p: &Policy, alphabet: &[&str]) -> Dfa {
        let n = alphabet.len();
        let dfa = match p {
            Policy::Zero => Dfa::determinize(&Nfa::zero(n)),
            Policy::One => Dfa::determinize(&Nfa::one(n)),
            Policy::Cmd(pat) => {
                assert!(
                    pat.params.is_empty(),
                    "oracle alphabet commands are parameterless"
                );
                let sym = alphabet
                    .iter()
                    .position(|a| *a == pat.name)
                    .unwrap_or_else(|| panic!("command `{}` not in oracle alphabet", pat.name));
                Dfa::determinize(&Nfa::symbol(n, sym))
            }
            Policy::Seq(a, b) => Dfa::determinize(&Nfa::concat(
                &nfa_of(build(a, alphabet)),
                &nfa_of(build(b, alphabet)),
            )),
            Policy::Union(a, b) => Dfa::determinize(&Nfa::union(
                &nfa_of(build(a, alphabet)),
                &nfa_of(build(b, alphabet)),
            )),
            Policy::Star(a) => Dfa::determinize(&Nfa::star(&nfa_of(build(a, alphabet)))),
            Policy::Intersect(a, b) => {
                Dfa::product(&build(a, alphabet), &build(b, alphabet), |x, y| x && y)
            }
            Policy::Neg(a) => build(a, alphabet).complement(),
        };
        dfa.minimize()
    }
    build(p, alphabet)
}

/// Embeds a DFA as an epsilon-free NFA so Thompson composition can consume
/// sub-results that came from product or complement constructions.
fn nfa_of(dfa: Dfa) -> Nfa {
    let mut n = Nfa::new(dfa.trans.len(), dfa.n_symbols, dfa.start);
    for (s, row) in dfa.trans.iter().enumerate() {
        for (sym, &t) in row.iter().enumerate() {
            n.step[s][sym].push(t);
        }
    }
    n.accept = dfa.accept;
    n
}
