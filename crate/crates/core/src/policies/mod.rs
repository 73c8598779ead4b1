//! The online actor and the behavioral reference policies.

mod container;
mod fit;
mod online;
mod reference;

pub use container::AnyPolicy;
pub use fit::{
    fit_ensemble, fit_head, fit_mc_dropout, fit_mle, head_log_likelihood, DropoutConfig, EnsembleConfig,
    HeadFamily, MleConfig, MleFit,
};
pub(crate) use fit::fit_head_observed;
pub use online::{OnlineBatch, OnlinePolicy, LOG_STD_MAX, LOG_STD_MIN};
pub use reference::{
    ensemble_moments, gaussian_head, ref_log_density, ref_log_density_grad, ref_moments, EnsemblePolicy,
    EnsembleSource, MleReg, RefEval, RefPolicy, VARIANCE_FLOOR,
};
