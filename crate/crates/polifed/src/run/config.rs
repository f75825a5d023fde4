//! Scenario configuration: one JSON document describing a synthetic
//! federation end to end, from data generation to the release gate.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::dpp::RestrictedProgram;
use crate::fl::NoisePlacement;
use crate::net::{Divisor, Strategy};
use crate::policy::{parse_policy, MacroTable};

use super::RunError;

fn default_rows_per_user() -> usize {
    40
}

fn default_epochs() -> u32 {
    1
}

fn default_target_delta() -> f64 {
    1e-5
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// A whole benchmark run as data. Keys are kebab-case in JSON; group
/// policies embed as policy text and programs as their JSON object form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScenarioConfig {
    pub task_kind: TaskKind,
    pub n_users: usize,
    #[serde(default = "default_rows_per_user")]
    pub rows_per_user: usize,
    /// When set, rows are pooled and split per class by Dirichlet(alpha)
    /// draws, giving a label-skewed federation instead of an IID one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_alpha: Option<f64>,
    /// Most restrictive first; this order is the cascade order.
    pub groups: Vec<GroupConfig>,
    pub strategy: Strategy,
    /// Rounds per trained phase.
    pub rounds: u64,
    /// Participants sampled per round (m).
    pub round_size: usize,
    /// Server learning rate applied at averaging.
    pub eta: f64,
    pub train: TrainSpec,
    #[serde(default)]
    pub divisor: Divisor,
    #[serde(default = "default_target_delta")]
    pub target_delta: f64,
    /// Root seed: data generation, model init, participant sampling, and
    /// noise draws all derive from it.
    pub seed: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Terminal coordinator program. Absent means the model is released
    /// directly, still subject to its policy's `return` step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_program: Option<RestrictedProgram>,
}

/// One policy group: who its members are (by share), what policy their
/// data carries, and how their updates are noised and budgeted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    /// Policy text every member attaches to its local dataset.
    pub policy: String,
    /// Share of `n_users`; all fractions together sum to 1.
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<ScenarioDp>,
    /// Spent-epsilon cap enforced against the ledger before release.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epsilon: Option<f64>,
    /// Per-round member program; groups without one get the synthesized
    /// default (`get_data`, then one training step encoding `dp`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_program: Option<RestrictedProgram>,
}

/// Differential-privacy settings of one group, minus the round size, which
/// the scenario fixes once for everyone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScenarioDp {
    /// L2 clipping bound S on each member's update.
    pub clip_bound: f64,
    /// Round-total Gaussian noise scale.
    pub noise_sigma: f64,
    #[serde(default)]
    pub placement: NoisePlacement,
}

/// Local SGD settings shared by every group's training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    /// Absent means full-batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl ScenarioConfig {
    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if self.n_users == 0 {
            return bad("n-users must be >= 1".into());
        }
        if self.rows_per_user == 0 {
            return bad("rows-per-user must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.round_size == 0 {
            return bad("round-size must be >= 1".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return bad(format!("train.lr must be positive and finite, got {}", self.train.lr));
        }
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.train.batch_size == Some(0) {
            return bad("train.batch-size must be >= 1 when set".into());
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return bad(format!(
                "target-delta must be in (0, 1), got {}",
                self.target_delta
            ));
        }
        if self.timeout_ms == 0 {
            return bad("timeout-ms must be >= 1".into());
        }
        if let Some(alpha) = self.dirichlet_alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return bad(format!(
                    "dirichlet-alpha must be positive and finite, got {alpha}"
                ));
            }
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let mut names = BTreeSet::new();
        let macros = MacroTable::with_defaults();
        for g in &self.groups {
            if g.name.is_empty() {
                return bad("group names must be nonempty".into());
            }
            if !names.insert(g.name.as_str()) {
                return bad(format!("duplicate group name `{}`", g.name));
            }
            if !(g.fraction.is_finite() && g.fraction > 0.0 && g.fraction <= 1.0) {
                return bad(format!(
                    "group `{}` fraction must be in (0, 1], got {}",
                    g.name, g.fraction
                ));
            }
            let parsed = parse_policy(&g.policy)
                .map_err(|e| RunError::Config(format!("group `{}` policy: {e}", g.name)))?;
            macros
                .expand(&parsed)
                .map_err(|e| RunError::Config(format!("group `{}` policy: {e}", g.name)))?;
            if let Some(dp) = &g.dp {
                if !(dp.clip_bound.is_finite() && dp.clip_bound > 0.0) {
                    return bad(format!(
                        "group `{}` clip-bound must be positive and finite, got {}",
                        g.name, dp.clip_bound
                    ));
                }
                if !(dp.noise_sigma.is_finite() && dp.noise_sigma >= 0.0) {
                    return bad(format!(
                        "group `{}` noise-sigma must be nonnegative and finite, got {}",
                        g.name, dp.noise_sigma
                    ));
                }
            }
            if let Some(max) = g.max_epsilon {
                if !(max.is_finite() && max > 0.0) {
                    return bad(format!(
                        "group `{}` max-epsilon must be positive and finite, got {max}",
                        g.name
                    ));
                }
            }
        }
        let total: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group fractions sum to {total}, expected 1"));
        }
        let counts = self.group_counts();
        for (g, &c) in self.groups.iter().zip(&counts) {
            if c == 0 {
                return bad(format!(
                    "group `{}` gets no members at {} users",
                    g.name, self.n_users
                ));
            }
        }
        // Sampling m participants needs a cohort of at least m in every
        // phase the strategy actually trains.
        let trained: Vec<usize> = match self.strategy {
            Strategy::Cascaded => counts.clone(),
            Strategy::SubsetOnly => vec![*counts.last().expect("nonempty groups")],
            Strategy::Combined => vec![self.n_users],
        };
        for cohort in trained {
            if self.round_size > cohort {
                return bad(format!(
                    "round-size {} exceeds a trained cohort of {cohort}",
                    self.round_size
                ));
            }
        }
        Ok(())
    }

    /// Group sizes from the fractions, cumulative-rounded so they always
    /// sum to `n_users` exactly.
    pub fn group_counts(&self) -> Vec<usize> {
        let n = self.n_users as f64;
        let mut counts = Vec::with_capacity(self.groups.len());
        let mut cum = 0.0;
        let mut prev = 0usize;
        for (i, g) in self.groups.iter().enumerate() {
            cum += g.fraction;
            let boundary = if i + 1 == self.groups.len() {
                self.n_users
            } else {
                ((cum * n).round() as usize).clamp(prev, self.n_users)
            };
            counts.push(boundary - prev);
            prev = boundary;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ScenarioConfig {
        ScenarioConfig {
            task_kind: TaskKind::Classification2Class,
            n_users: 10,
            rows_per_user: 8,
            dirichlet_alpha: None,
            groups: vec![GroupConfig {
                name: "all".into(),
                policy: "get_data . runFL . return".into(),
                fraction: 1.0,
                dp: None,
                max_epsilon: None,
                local_program: None,
            }],
            strategy: Strategy::Cascaded,
            rounds: 2,
            round_size: 4,
            eta: 1.0,
            train: TrainSpec {
                lr: 0.1,
                epochs: 1,
                batch_size: None,
            },
            divisor: Divisor::Total,
            target_delta: 1e-5,
            seed: 7,
            timeout_ms: 30_000,
            out_dir: None,
            global_program: None,
        }
    }

    #[test]
    fn json_round_trip_uses_kebab_case_keys() {
        let cfg = minimal();
        let json = cfg.to_json_pretty();
        assert!(json.contains("\"task-kind\": \"classification-2class\""), "{json}");
        assert!(json.contains("\"n-users\""), "{json}");
        assert!(json.contains("\"round-size\""), "{json}");
        let back = ScenarioConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_fields_are_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&minimal().to_json_pretty()).unwrap();
        json["typo-field"] = 1.into();
        assert!(ScenarioConfig::from_json(&json.to_string()).is_err());

        let mut cfg = minimal();
        cfg.groups[0].fraction = 0.5;
        assert!(matches!(cfg.validate(), Err(RunError::Config(m)) if m.contains("sum")));

        let mut cfg = minimal();
        cfg.groups[0].policy = "get_data . (".into();
        assert!(cfg.validate().is_err());

        let mut cfg = minimal();
        cfg.round_size = 11;
        assert!(matches!(cfg.validate(), Err(RunError::Config(m)) if m.contains("cohort")));
    }

    #[test]
    fn group_counts_partition_all_users_exactly() {
        let mut cfg = minimal();
        cfg.n_users = 7;
        cfg.round_size = 2;
        cfg.groups = vec![
            GroupConfig {
                name: "a".into(),
                policy: "get_data . runFL . return".into(),
                fraction: 1.0 / 3.0,
                dp: None,
                max_epsilon: None,
                local_program: None,
            },
            GroupConfig {
                name: "b".into(),
                policy: "get_data . runFL . return".into(),
                fraction: 1.0 / 3.0,
                dp: None,
                max_epsilon: None,
                local_program: None,
            },
            GroupConfig {
                name: "c".into(),
                policy: "get_data . runFL . return".into(),
                fraction: 1.0 / 3.0,
                dp: None,
                max_epsilon: None,
                local_program: None,
            },
        ];
        let counts = cfg.group_counts();
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert!(counts.iter().all(|&c| c >= 2), "{counts:?}");
        cfg.validate().unwrap();
    }
}
