//! A small self-contained convolutional network: forward, backward and
//! SGD training, with tapped conv activations and an optional warp hook.

mod net;
mod spec;
mod train;
mod weights;

pub use net::{FeatureStack, Network, WarpHook};
pub use spec::{LayerSpec, NetworkSpec, Shape, TapSpec, MIN_TAP_SIDE};
pub use train::{accuracy, train, BatchHook, EpochStats, TrainConfig};
pub use weights::{ParamTensor, Weights};
pub(crate) use weights::read_u32;

#[cfg(test)]
mod tests;
