//! Counterfactual risk minimization with partially labelled logged bandit
//! feedback.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod estimators;
pub mod exec;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod trainers;
