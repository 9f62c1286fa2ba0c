//! Llama-style decoder-only transformer with hand-written gradients.

mod config;
pub(crate) mod model;
mod params;
mod real;

pub use config::ModelConfig;
pub use model::{
    forward, forward_windows, loss, loss_and_grads, next_token_dist, position_dists, softmax,
};
pub use params::{
    init_params, GradSet, LayerParams, Matrix, ParamSet, Params, TensorKind, TensorMut, TensorRef,
    INIT_STD,
};
pub use real::Real;
