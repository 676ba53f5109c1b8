//! Graph execution in FP32, FP16-weight and INT8 modes.

pub mod fixtures;
pub mod int8;
pub mod kernels;
pub mod par;
pub mod session;

pub use fixtures::{FixtureCheck, Fixtures, FIXTURE_TOLERANCE};
pub use int8::QActivation;
pub use kernels::{Activation, KernelError, Scalar};
pub use session::{execute, execute_int8, execute_with_mode, ExecError, ExecutionMode, Outputs, Session};
