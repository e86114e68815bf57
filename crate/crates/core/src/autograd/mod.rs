//! Dense-network numerics: forward evaluation, hand-derived gradients, losses,
//! optimizers and gradient verification. Scalars are `f64` throughout.

pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod optim;

pub use dense::{
    Activation, ArchSpec, Backward, DenseNet, ForwardCache, GradTape, InitScheme, InputGrads, Layer, LayerGrad,
    LayerSpec, Matrix,
};
pub use gradcheck::{batch_loss, central_difference, finite_diff_check, max_relative_error};
pub use loss::{cross_entropy, entropy, mse, soft_cross_entropy, softmax, Example, Target};
pub use optim::{AdamParams, Optimizer, OptimizerKind};
