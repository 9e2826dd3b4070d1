//! Feed-forward engine with hand-derived backpropagation.

pub mod adam;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod network;
pub mod spec;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{check_network, gradient_check, GradCheckReport};
pub use io::{network_from_bytes, network_to_bytes};
pub use layers::{BatchNormState, ConvKind, ConvParams, DenseParams, Phase, PoolKind};
pub use network::{Mode, Network, ParamRole};
pub use spec::{LayerSpec, NetworkSpec};
pub use tensor::Tensor3;
pub use train::{
    argmax, dataset_tensor, predict, predict_proba, train, train_tensors, EpochRecord, TrainConfig, TrainHistory,
};
