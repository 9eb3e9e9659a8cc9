//! Reverse-mode gradients, gradient checking, SGD and a small CNN trainer.

mod gradcheck;
mod grads;
mod net;
mod optim;
mod trainer;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use grads::{
    conv_backward, depthwise_backward, doconv_backward, ConvGrads, DoConvGrads,
};
pub use net::{
    argmax, softmax_cross_entropy, AnyNetwork, ConvLayer, ConvOrigin, DenseLayer, DepthwiseLayer,
    ConvSpec, DenseSpec, DepthwiseSpec, GradSet, Layer, LayerSpec, Network, NetworkSpec, ParamId, ParamRole, Variant,
};
pub use optim::{sgd_update, OptimizerState, SgdConfig};
pub use trainer::{
    evaluate, train_network, train_run, EpochStats, EvalStats, LrSchedule, TrainConfig, TrainReport,
};
