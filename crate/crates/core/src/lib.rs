//! Model-selection reinforcement learning on finite episodic MDPs and linear
//! kernel MDPs, with exact dynamic-programming oracles, assumption checks and
//! a seeded experiment harness.

pub mod arl_gen;
pub mod arl_lin;
pub mod diagnostics;
pub mod error;
pub mod families;
pub mod harness;
pub mod ledger;
pub mod linear;
pub mod mdp;
pub mod vtr;

pub use error::{Error, Result};
