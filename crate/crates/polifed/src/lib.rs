//! Policy-enforced federated learning.
//!
//! This crate trains models across edge nodes that never hand over raw data.
//! Every value that leaves a node travels as a data-policy pair: the payload
//! is opaque, and an attached policy (a regular expression over parameterized
//! commands) says exactly which commands may still be applied to it. Policies
//! advance by Brzozowski derivatives as commands execute, so enforcement is a
//! local, syntactic check at every step; release requires the residual policy
//! to accept the empty trace after `return`.
//!
//! The pieces:
//!
//! - [`policy`]: the policy language (parser, derivatives, reduction, macros).
//! - [`dpp`]: data-policy pairs, the command registry, and restricted programs.
//! - [`fl`]: model parameters, differentiable tasks, local training, clipping,
//!   noise, and federated averaging.
//! - [`dp`]: a Renyi differential privacy accountant with a persistent
//!   per-group ledger and budget enforcement.
//! - [`data`]: seeded synthetic task generators, Dirichlet partitioning,
//!   column filtering, and geofence predicates.
//! - [`net`]: the length-prefixed wire protocol, edge node and coordinator,
//!   round execution with timing capture, and group scheduling strategies.
//! - [`run`]: scenario configs, the end-to-end driver, and run reports.

pub mod data;
pub mod dp;
pub mod dpp;
pub mod fl;
pub mod net;
pub mod policy;
pub mod run;
