//! Small neural-network toolkit over candle tensors at float64.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{key_bias_from_mask, mean_pool_groups, Activation, LayerNorm, Linear, Mlp2, Mode, TransformerLayer};
pub use optim::Optimizer;
pub use params::ParamStore;
