//! Differentiable compute core: tensors, layer primitives, loss and masked SGD.

mod kernels;
mod layer;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::softmax;
pub use layer::{forward, LayerKind, LayerSpec};
pub use optim::{sgd_step, Sgd};
pub use params::{init_layer_params, ParamRef, ParamRole, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
