//! Dense row-major matrices and the layers built on them.
//!
//! Everything here is generic over [`Real`]: `f64` for gradient checking,
//! `f32` for training and tracking. Backward passes are written by hand.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod matrix;
mod ops;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{BatchNorm, BatchNormCache, Linear, Mlp, MlpCache, MlpLayer};
pub use loss::{bce_with_logits, masked_mse, mse};
pub use matrix::{Matrix, Real};
pub use ops::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, softmax_rows,
    softmax_rows_backward,
};
pub use params::{flatten_params, load_flat_params, param_count, zeroed, Parameterized};
pub(crate) use params::join as params_join;
