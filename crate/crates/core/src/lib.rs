//! Desk-scale laboratory for critic-free policy-gradient RL with
//! outcome-grounded token-level credit assignment.
//!
//! The crate trains a tiny decoder-only transformer on synthetic verifiable
//! arithmetic tasks with GRPO, reshapes the broadcast sequence advantage
//! into per-token advantages using perturbation- or gradient-based
//! importance signals, and ships the evaluation studies (counterfactual
//! oracle, recall curves, variance simulation, timing) used to verify each
//! component.

pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod policy;
pub mod reshaping;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{finite_difference_check, Graph, NodeId, Tensor};
