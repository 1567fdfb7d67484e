//! Small neural-network stack whose parametric layers can run their forward
//! pass on simulated crossbars while backpropagating in full precision.

pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod layers;
pub mod overrides;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_mnist, synthetic_blobs, synthetic_digits, Dataset};
pub use graph::{Graph, Var};
pub use layers::{Layer, LayerMode, MemConv2d, MemLayerConfig, MemLinear, Model, StalePolicy};
pub use overrides::{apply_overrides, LayerOverride};
pub use tensor::Tensor;
pub use train::{infer, train, InferReport, Sgd, TrainLog, TrainParams};
