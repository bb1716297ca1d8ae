pub mod error;
pub mod data;
pub mod decoder;
pub mod detect;
pub mod encoder;
pub mod gradcheck;
pub mod harness;
pub mod instance;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod postprocess;
pub mod tape;
pub mod tensor;
pub mod tsr;

pub use error::{Error, Result};
pub use tape::{ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::{Scalar, Tensor};
