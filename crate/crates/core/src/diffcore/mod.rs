//! Minimal differentiable building blocks: dense networks with analytic
//! reverse-mode gradients and an Adam optimizer.

mod adam;
mod mlp;

pub use adam::{AdamConfig, OptimState};
pub use mlp::{ForwardCache, GradBuffer, Layer, MlpParams};
