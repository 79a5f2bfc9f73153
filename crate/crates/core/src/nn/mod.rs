//! A small CPU convolutional network toolkit in f64 with hand-written
//! backward passes. Models keep their weights in flat parameter vectors so
//! optimizers, checkpoints and weight transfer work on plain slices.

mod backbone;
mod layers;
mod optim;
mod tensor;

pub use backbone::{Backbone, BackboneTrace, Layer};
pub use layers::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, upsample2, upsample2_backward,
    Activation, Bottleneck, Conv2d, ConvAct, ConvActCache, Init, Linear, ParamAllocator,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{gemm, FeatureMap};
