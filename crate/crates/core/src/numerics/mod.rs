//! Dense linear algebra, activations, reverse-mode differentiation and
//! the independent numeric oracles (finite differences, direct solve,
//! power iteration) used to check them.

mod gradcheck;
mod matrix;
mod ops;
mod params;
mod tape;

pub use matrix::{Matrix, Vector};
pub use ops::{
    fd_gradient, gelu, gelu_grad_scalar, gelu_scalar, logit, normal_cdf, rbf_expand, sigmoid,
    softmax_rows, solve_linear, spectral_radius, sym_normalize,
};
pub use gradcheck::{check_param_gradients, GroupCheck};
pub use params::{xavier_bound, xavier_uniform, Param, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
pub(crate) use tape::row_entropy_value;
