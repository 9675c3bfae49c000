//! Minimal reverse-mode compute layer: exactly the tensor operations and
//! layers the pipeline's networks need, with a finite-difference gradient
//! contract and a manifest+blob checkpoint format.

mod checkpoint;
mod gradcheck;
pub mod kernels;
mod layers;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled};
pub use layers::{
    all_ones_mask, hidden_degrees, made_hidden_mask, made_input_mask, made_output_mask,
    strict_lower_mask, Conv1dCircular, Dense, MaskedDense,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
