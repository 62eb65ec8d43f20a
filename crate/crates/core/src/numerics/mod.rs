//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every trainable kernel in the crate is expressed as operations recorded on
//! a [`Tape`]. Values are double precision. Broadcasting is limited to a
//! right-hand operand whose shape is a suffix of the left-hand shape (leading
//! batch dims); anything else needs an explicit reshape.

mod gradcheck;
mod nn;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_difference, relative_error, GradReport};
pub use nn::{Activation, LayerNorm, Linear, Mlp2, ParamId, ParamStore, Params};
pub use ops::{Unary, LAYER_NORM_EPS};
pub(crate) use ops::sigmoid;
pub use tape::{Backward, Tape, Var};
pub use tensor::Tensor;
