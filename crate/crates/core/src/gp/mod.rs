//! Exact Gaussian-process regression for behavioral reference policies.

mod fit;
mod kernel;
mod lml;
mod posterior;

pub use fit::{fit_kernel, fit_posterior, gp_fit, GpFitConfig};
pub use kernel::{kernel_eval, KernelKind, KernelSpec};
pub use lml::{factorize, log_marginal_likelihood, Factor, LogMarginal};
pub use posterior::GpPosterior;
pub(crate) use posterior::GpRecord;
