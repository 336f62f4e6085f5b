pub mod autodiff;
pub mod coarse;
pub mod corpus;
pub mod error;
pub mod fine;
pub mod harness;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod visual;

pub use autodiff::{Conv2dSpec, Tape, Var};
pub use error::{Error, FormatError, Result, TensorError};
pub use rng::Rng;
pub use tensor::Tensor;
