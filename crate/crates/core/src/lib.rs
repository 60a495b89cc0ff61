pub mod activation;
pub mod attention;
pub mod backbone;
pub mod config;
pub mod conv;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod linear;
pub mod mil;
pub mod module;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
