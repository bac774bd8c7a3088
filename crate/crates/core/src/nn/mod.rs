//! Network definitions, parameter storage and the training engine.

pub mod engine;
pub mod io;
pub mod model;
pub mod params;

pub use engine::{
    accumulate_gradient, backward, forward, logits, loss_and_gradient, softmax_cross_entropy, sum_gradients,
};
pub use model::{build_model, Activation, InitScheme, Layer, ModelConfig, ModelSpec, PoolKind, Variant};
pub use params::{init_params, GradientUpdate, ParamEntry, ParamLayout, ParamRole, ParamSet};
