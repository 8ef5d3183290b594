//! Reverse-mode automatic differentiation on a flat tape, plus the
//! optimizers and the finite-difference oracle used to audit it.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdCoord, FdReport};
pub use optim::{adam_step, sgd_step, OptimHyper, OptimKind, OptimizerState};
pub use tape::{BackwardPass, Tape, ValueId};
pub use tensor::{Param, ParamGroup, ParamId, ParamSet, Tensor};
