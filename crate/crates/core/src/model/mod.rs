//! Model intermediate representation, the TMF container and architecture builders.

pub mod builders;
pub mod checkpoint;
pub mod graph;
pub mod tensor;
pub mod tmf;

pub use builders::{build_densenet, build_mobilenetv2_classifier, BuildError, DenseNetConfig, GraphBuilder, MobileNetV2Config};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use graph::{FusedActivation, Graph, Node, NodeId, Op, Padding, ParamCount, Scope, Violation};
pub use tensor::{DType, QuantParams, Tensor, TensorData};
pub use tmf::{TmfError, TmfModel};
