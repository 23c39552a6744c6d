//! Minimal reverse-mode automatic differentiation over dense vectors.

mod nn;
mod optim;
mod params;
mod tape;

pub use nn::{attentional_aggregate, Activation, AttentionParams, MlpParams, RecurrentParams};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore, Tensor};
pub use tape::{Backward, Tape, Var};
