//! Dense double-precision tensors, tape-based reverse-mode
//! differentiation, and the Adam optimiser.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_where, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{opt_step, OptState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{log_sum_exp, softmax, Tensor};
