//! Fire-module segmentation network with its training loss and loop.

mod layers;
mod loss;
mod model;
mod train;

pub use layers::{
    plain_conv_count, plain_deconv_count, Conv, Deconv, FireCache, FireDeconv, FireDeconvCache,
    FireModule, LayerCount,
};
pub use loss::{inverse_frequency_weights, loss, softmax_cross_entropy};
pub use model::{InputNorm, NetworkParams, ParamCounts, Profile, Trace, DOWNSAMPLE};
pub use train::{evaluate_loss, train_epoch, TrainConfig, TrainFrame, Trainer};

/// Per-layer and total counts, see [`NetworkParams::count_params`].
pub fn count_params<T: crate::tensor::Scalar>(params: &NetworkParams<T>, h: usize, w: usize) -> ParamCounts {
    params.count_params(h, w)
}
