//! KL-regularized actor-critic with behavioral reference policies.

pub mod actorcritic;
pub mod diagnostics;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod gp;
pub mod klreg;
pub mod numeric;
pub mod policies;

pub use error::{Error, Result};
