//! Minimal dense-tensor engine: exactly the layers, losses and optimizer the
//! point-cloud regressor needs, with reverse-mode gradients in `f64`.

mod adamax;
mod layers;
pub mod ops;
mod tape;
mod tensor;

pub use adamax::{adamax_update, AdamaxConfig, AdamaxState};
pub use layers::{Layer, LayerKind, LayerSpec, Sequential, TapeForward, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use ops::{
    forward_batchnorm, forward_maxpool_points, forward_relu, forward_shared_linear, BnStats, Mode,
    Pooled,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
