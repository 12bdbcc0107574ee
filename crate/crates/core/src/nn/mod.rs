//! Encoder, projection heads, predictors, and the online/target pair.

mod config;
pub(crate) mod modules;
mod network;
pub mod ops;
mod params;

pub use config::{receptive_field, EncoderConfig, KernelOrdering, MLPHeadConfig, NetworkSpec, TCNHeadConfig};
pub use modules::{BatchNorm, Conv, Encoder, EncoderCache, ForwardMode, Linear, Mlp, MlpCache, StatUpdate, Tcn, TcnCache};
pub use network::{ema_update, DualNetworkState, HeadOutputs, Network, OnlineCache, PredictorKind};
pub use params::{to_storage, ParamKind, ParamTree, Tensor};
