//! Dense tensors, tape-based reverse-mode differentiation and the recurrent
//! building blocks the reader is assembled from.

pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
mod gru_math;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gru::{bigru, gru_cell, gru_sequence, zero_state, BiGruOutput, BiGruParams, GruParams};
pub use gru_math::sigmoid;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, MASK_PENALTY};
pub use tensor::Tensor;
