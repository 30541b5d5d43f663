//! Dense tensors, differentiable primitives, parameter storage and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Pass, Probe};
pub use ops::{NormMode, NormStats, Padding};
pub use params::{Param, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor4};
