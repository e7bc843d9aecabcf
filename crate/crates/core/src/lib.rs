//! Desk-scale actor-critic laboratory.
//!
//! Implements clipped-surrogate PPO, a critic-free group-baseline variant and
//! an ensemble variant in which several small critics are trained on disjoint
//! per-prompt shards of each rollout batch. The spread of the critics' value
//! estimates drives two loss refinements: the surrogate is masked at the
//! lowest-spread tokens and the entropy bonus is withheld at the
//! highest-spread tokens.
//!
//! Everything runs on small tanh MLPs with hand-written reverse-mode
//! gradients and on toy sparse-reward sequence environments, so every piece
//! can be checked against an exact oracle.

pub mod advantage;
pub mod approximator;
pub mod ensemble;
pub mod envs;
pub mod error;
pub mod objective;
pub mod rollout;
pub mod seed;
pub mod trainer;
pub mod xio;

pub use error::{Error, Result};
