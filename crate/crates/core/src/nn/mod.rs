//! Dense arrays, reverse-mode differentiation, layers and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{GradCheck, GradReport};
pub use graph::{BatchNormMode, Grads, Graph, Var};
pub use layers::{apply_bn_updates, time_embedding, time_embedding_rows, Bound, BnUpdate, Ctx, Layer, Mode, ParamSet, Sequential};
pub use optim::{adam_step, AdamConfig, AdamState, EmaState};
pub use tensor::{Layout, Scalar, Tensor};
