//! Renyi differential privacy accounting for federated rounds.
//!
//! Each round that samples users with probability `q` and masks the clipped
//! update sum with Gaussian noise of multiplier `z` (noise std in units of
//! the clipping bound) is one instance of the Poisson-subsampled Gaussian
//! mechanism. Its Renyi divergence at order `alpha` is the log moment
//!
//! ```text
//! rdp(alpha) = log E_{x ~ N(0, z^2)} [ ((1-q) + q e^{(2x-1)/(2 z^2)})^alpha ]
//!              / (alpha - 1)
//! ```
//!
//! evaluated numerically, composed additively across rounds, and converted
//! to an `(epsilon, delta)` guarantee by the standard minimization over
//! orders. A [`PrivacyLedger`] records every charged round per group; groups
//! absent from a round are never charged, which is exactly the
//! post-processing robustness that makes cascaded training free for the
//! already-trained groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("unknown privacy group `{0}`")]
    UnknownGroup(String),
    #[error("malformed ledger line {line}: {message}")]
    MalformedLedger { line: usize, message: String },
}

/// Renyi orders the accountant evaluates: a dense sweep over small orders
/// where subsampling amplification bites, plus sparse large orders that
/// matter when noise is high.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = Vec::new();
    let mut a = 1.25;
    while a <= 64.0 + 1e-9 {
        orders.push(a);
        a += 0.25;
    }
    orders.extend([128.0, 256.0, 512.0]);
    orders
}

/// Per-step RDP of the Poisson-subsampled Gaussian at one order, by
/// trapezoidal quadrature of the log moment on a uniform grid. Full sampling
/// (`q == 1`) short-circuits to the exact Gaussian closed form
/// `alpha / (2 z^2)`.
fn rdp_step(q: f64, z: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * z * z);
    }
    let ln_q = q.ln();
    // ln(1-q) via ln_1p for accuracy at small q.
    let ln_1mq = (-q).ln_1p();
    let two_z2 = 2.0 * z * z;

    // The tilted components of the moment integrand are Gaussians of width z
    // centered between 0 and alpha, so this range truncates only e^{-72}
    // relative tails. The integrand is analytic with Gaussian decay, where
    // the equispaced trapezoid rule converges spectrally; h = z/32 leaves
    // rounding as the dominant error.
    let lo = -1.0 - 12.0 * z;
    let hi = alpha + 1.0 + 12.0 * z;
    let h = z / 32.0;
    let n = (((hi - lo) / h).ceil() as usize).max(512);
    let h = (hi - lo) / n as f64;

    let ln_norm = -(z * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let mut terms = Vec::with_capacity(n + 1);
    let mut max_term = f64::NEG_INFINITY;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let ln_mu = ln_norm - x * x / two_z2;
        let t = (2.0 * x - 1.0) / two_z2;
        let ln_ratio = log_add_exp(ln_1mq, ln_q + t);
        let mut term = ln_mu + alpha * ln_ratio;
        if i == 0 || i == n {
            term += 0.5f64.ln();
        }
        terms.push(term);
        if term > max_term {
            max_term = term;
        }
    }
    let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
    let log_moment = max_term + sum.ln() + h.ln();
    // The moment is >= 1 by Jensen; clamp tiny negative rounding residue.
    (log_moment / (alpha - 1.0)).max(0.0)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn validate_q_z(q: f64, z: f64) -> Result<(), DpError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DpError::InvalidArg(format!(
            "sampling rate q must be in (0, 1], got {q}"
        )));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(DpError::InvalidArg(format!(
            "noise multiplier z must be positive and finite, got {z}"
        )));
    }
    Ok(())
}

/// RDP of `steps` rounds of the subsampled Gaussian at each requested order.
/// Composition is additive, so this is exactly `steps` times the one-step
/// value; monotone increasing in `steps` and `q`, decreasing in `z`.
pub fn rdp_subsampled_gaussian(
    q: f64,
    z: f64,
    steps: u64,
    orders: &[f64],
) -> Result<Vec<f64>, DpError> {
    validate_q_z(q, z)?;
    if steps == 0 {
        return Err(DpError::InvalidArg("steps must be >= 1".into()));
    }
    if orders.is_empty() {
        return Err(DpError::InvalidArg("orders must be non-empty".into()));
    }
    if let Some(bad) = orders.iter().find(|a| !(**a > 1.0)) {
        return Err(DpError::InvalidArg(format!(
            "Renyi orders must exceed 1, got {bad}"
        )));
    }
    Ok(orders
        .iter()
        .map(|&a| steps as f64 * rdp_step(q, z, a))
        .collect())
}

/// Standard RDP to `(epsilon, delta)` conversion: the minimum over orders of
/// `rdp(alpha) + log(1/delta) / (alpha - 1)`, together with the minimizing
/// order.
pub fn epsilon_from_rdp(rdp: &[f64], orders: &[f64], delta: f64) -> Result<(f64, f64), DpError> {
    if orders.is_empty() || rdp.len() != orders.len() {
        return Err(DpError::InvalidArg(format!(
            "{} rdp values for {} orders",
            rdp.len(),
            orders.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DpError::InvalidArg(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&r, &a) in rdp.iter().zip(orders) {
        let eps = r + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// One persisted charge: a group consumed one subsampled-Gaussian round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundCharge {
    pub group: String,
    pub q: f64,
    pub z: f64,
    /// Zero-based index among this group's charged rounds.
    pub round_index: u64,
}

/// Spent privacy of one group, as reported to operators.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpentReport {
    pub group: String,
    pub epsilon: f64,
    pub delta: f64,
    /// Order that minimized the conversion; absent for an uncharged group.
    pub best_order: Option<f64>,
}

/// Result of a budget check.
#[derive(Clone, Debug, PartialEq)]
pub enum BudgetOutcome {
    Pass { spent: f64 },
    Fail { spent: f64, max_epsilon: f64 },
}

impl BudgetOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, BudgetOutcome::Pass { .. })
    }

    pub fn spent(&self) -> f64 {
        match self {
            BudgetOutcome::Pass { spent } | BudgetOutcome::Fail { spent, .. } => *spent,
        }
    }
}

/// Append-only record of per-group round charges, with spent-epsilon
/// queries at the ledger's target delta.
///
/// The coordinator is the single writer; charges compose additively, so the
/// spent epsilon of a group depends only on the multiset of its charges,
/// never on interleaving with other groups.
#[derive(Clone, Debug)]
pub struct PrivacyLedger {
    target_delta: f64,
    orders: Vec<f64>,
    records: Vec<RoundCharge>,
    /// Registered groups; a group with no charges reports epsilon 0.
    groups: Vec<String>,
    /// Per-step RDP at `orders`, keyed by the (q, z) bit patterns. Filled on
    /// first charge of a (q, z) pair so repeated round charges are cheap.
    step_cache: BTreeMap<(u64, u64), Vec<f64>>,
}

impl PrivacyLedger {
    pub fn new(target_delta: f64) -> Result<Self, DpError> {
        if !(target_delta > 0.0 && target_delta < 1.0) {
            return Err(DpError::InvalidArg(format!(
                "delta must be in (0, 1), got {target_delta}"
            )));
        }
        Ok(PrivacyLedger {
            target_delta,
            orders: default_orders(),
            records: Vec::new(),
            groups: Vec::new(),
            step_cache: BTreeMap::new(),
        })
    }

    pub fn target_delta(&self) -> f64 {
        self.target_delta
    }

    pub fn records(&self) -> &[RoundCharge] {
        &self.records
    }

    /// Makes a group known so budget checks on it succeed with zero spend.
    pub fn register_group(&mut self, group: &str) {
        if !self.groups.iter().any(|g| g == group) {
            self.groups.push(group.to_string());
        }
    }

    fn known(&self, group: &str) -> bool {
        self.groups.iter().any(|g| g == group)
    }

    /// Appends one round charge for `group`. Groups not charged in a round
    /// spend nothing there.
    pub fn charge_round(&mut self, group: &str, q: f64, z: f64) -> Result<(), DpError> {
        validate_q_z(q, z)?;
        self.register_group(group);
        let key = (q.to_bits(), z.to_bits());
        if !self.step_cache.contains_key(&key) {
            let step: Vec<f64> = self.orders.iter().map(|&a| rdp_step(q, z, a)).collect();
            self.step_cache.insert(key, step);
        }
        let round_index = self.records.iter().filter(|r| r.group == group).count() as u64;
        self.records.push(RoundCharge {
            group: group.to_string(),
            q,
            z,
            round_index,
        });
        Ok(())
    }

    /// Total RDP of a group's charges at every order.
    fn total_rdp(&self, group: &str) -> Vec<f64> {
        let mut counts: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.group == group) {
            *counts.entry((r.q.to_bits(), r.z.to_bits())).or_insert(0) += 1;
        }
        let mut total = vec![0.0; self.orders.len()];
        for (key, count) in counts {
            let step = &self.step_cache[&key];
            for (t, s) in total.iter_mut().zip(step) {
                *t += count as f64 * s;
            }
        }
        total
    }

    /// Spent `(epsilon, best_order)` of `group` at the target delta. A
    /// registered group with no charges spends 0 by convention.
    pub fn spent_epsilon(&self, group: &str) -> Result<(f64, Option<f64>), DpError> {
        if !self.known(group) {
            return Err(DpError::UnknownGroup(group.to_string()));
        }
        if !self.records.iter().any(|r| r.group == group) {
            return Ok((0.0, None));
        }
        let total = self.total_rdp(group);
        let (eps, order) = epsilon_from_rdp(&total, &self.orders, self.target_delta)?;
        Ok((eps, Some(order)))
    }

    /// Budget check: passes iff the group's spent epsilon is at most
    /// `max_epsilon`.
    pub fn enforce_budget(&self, group: &str, max_epsilon: f64) -> Result<BudgetOutcome, DpError> {
        if !(max_epsilon > 0.0) {
            return Err(DpError::InvalidArg(format!(
                "max epsilon must be positive, got {max_epsilon}"
            )));
        }
        let (spent, _) = self.spent_epsilon(group)?;
        if spent <= max_epsilon {
            Ok(BudgetOutcome::Pass { spent })
        } else {
            Ok(BudgetOutcome::Fail {
                spent,
                max_epsilon,
            })
        }
    }

    pub fn report(&self, group: &str) -> Result<SpentReport, DpError> {
        let (epsilon, best_order) = self.spent_epsilon(group)?;
        Ok(SpentReport {
            group: group.to_string(),
            epsilon,
            delta: self.target_delta,
            best_order,
        })
    }

    /// One JSON object per charged round, in charge order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("charge serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a ledger from its JSONL serialization. Groups present in the
    /// text are registered; `register_group` adds back any uncharged ones.
    pub fn from_jsonl(target_delta: f64, text: &str) -> Result<Self, DpError> {
        let mut ledger = PrivacyLedger::new(target_delta)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: RoundCharge =
                serde_json::from_str(line).map_err(|e| DpError::MalformedLedger {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            ledger.charge_round(&r.group, r.q, r.z)?;
        }
        Ok(ledger)
    }
}
